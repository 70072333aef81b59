use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Aggregation;
use crate::objectives::LossKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// No-reference image quality assessment (regression on opinion scores).
    Iqa,
    /// Image memorability (regression).
    Memorability,
    /// Evoked emotion (classification).
    Emotion,
}

impl TaskKind {
    pub fn is_classification(self) -> bool {
        matches!(self, TaskKind::Emotion)
    }

    pub fn default_loss(self) -> LossKind {
        match self {
            TaskKind::Iqa => LossKind::Plcc,
            TaskKind::Memorability => LossKind::Mse,
            TaskKind::Emotion => LossKind::CrossEntropy,
        }
    }

    pub fn default_validation_metric(self) -> ValidationMetric {
        if self.is_classification() {
            ValidationMetric::Accuracy
        } else {
            ValidationMetric::Srcc
        }
    }

    /// IQA reports the median over splits, the other tasks the mean.
    pub fn aggregation(self) -> Aggregation {
        match self {
            TaskKind::Iqa => Aggregation::Median,
            TaskKind::Memorability | TaskKind::Emotion => Aggregation::Mean,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Iqa => "iqa",
            TaskKind::Memorability => "memorability",
            TaskKind::Emotion => "emotion",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationMetric {
    Srcc,
    Accuracy,
}

/// What a dataset asks of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Required for classification tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_metric: Option<ValidationMetric>,
    /// Training replicas per IQA image, 3 to 10.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iqa_replicas: Option<usize>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            num_classes: None,
            loss: None,
            validation_metric: None,
            iqa_replicas: None,
        }
    }

    pub fn classification(num_classes: usize) -> Self {
        Self {
            num_classes: Some(num_classes),
            ..Self::new(TaskKind::Emotion)
        }
    }

    pub fn loss(&self) -> LossKind {
        self.loss.unwrap_or(self.kind.default_loss())
    }

    pub fn validation_metric(&self) -> ValidationMetric {
        self.validation_metric
            .unwrap_or(self.kind.default_validation_metric())
    }

    pub fn output_dim(&self) -> Result<usize> {
        if self.kind.is_classification() {
            self.num_classes
                .filter(|&c| c >= 2)
                .ok_or_else(|| Error::config("task.num_classes", "classification needs >= 2 classes"))
        } else {
            Ok(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.output_dim()?;
        let loss_ok = match self.loss() {
            LossKind::CrossEntropy => self.kind.is_classification(),
            LossKind::Plcc | LossKind::Mse => !self.kind.is_classification(),
        };
        if !loss_ok {
            return Err(Error::config(
                "task.loss",
                format!("{:?} does not fit task {}", self.loss(), self.kind),
            ));
        }
        let metric_ok = match self.validation_metric() {
            ValidationMetric::Accuracy => self.kind.is_classification(),
            ValidationMetric::Srcc => !self.kind.is_classification(),
        };
        if !metric_ok {
            return Err(Error::config(
                "task.validation_metric",
                format!("{:?} does not fit task {}", self.validation_metric(), self.kind),
            ));
        }
        if let Some(r) = self.iqa_replicas {
            if !(3..=10).contains(&r) {
                return Err(Error::config("task.iqa_replicas", "must lie in 3..=10"));
            }
        }
        Ok(())
    }

    /// Two tasks can share a checkpoint when their outputs mean the same thing.
    pub fn compatible_with(&self, other: &TaskSpec) -> Result<()> {
        if self.kind.is_classification() != other.kind.is_classification() {
            return Err(Error::TaskMismatch(format!(
                "{} model cannot be evaluated on a {} dataset",
                if self.kind.is_classification() { "classification" } else { "regression" },
                if other.kind.is_classification() { "classification" } else { "regression" },
            )));
        }
        if self.kind.is_classification() && self.num_classes != other.num_classes {
            return Err(Error::TaskMismatch(format!(
                "label space of {:?} classes differs from {:?}",
                self.num_classes, other.num_classes
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_per_task() {
        let iqa = TaskSpec::new(TaskKind::Iqa);
        assert_eq!(iqa.loss(), LossKind::Plcc);
        assert_eq!(iqa.validation_metric(), ValidationMetric::Srcc);
        assert_eq!(iqa.output_dim().unwrap(), 1);
        let mem = TaskSpec::new(TaskKind::Memorability);
        assert_eq!(mem.loss(), LossKind::Mse);
        let emo = TaskSpec::classification(8);
        assert_eq!(emo.loss(), LossKind::CrossEntropy);
        assert_eq!(emo.validation_metric(), ValidationMetric::Accuracy);
        assert_eq!(emo.output_dim().unwrap(), 8);
    }

    #[test]
    fn validation_catches_mismatches() {
        assert!(TaskSpec::new(TaskKind::Emotion).validate().is_err());
        let mut t = TaskSpec::new(TaskKind::Iqa);
        t.loss = Some(LossKind::CrossEntropy);
        assert!(t.validate().is_err());
        let mut t = TaskSpec::new(TaskKind::Iqa);
        t.iqa_replicas = Some(11);
        assert!(t.validate().is_err());
        assert!(TaskSpec::classification(8)
            .compatible_with(&TaskSpec::new(TaskKind::Iqa))
            .is_err());
        assert!(TaskSpec::new(TaskKind::Memorability)
            .compatible_with(&TaskSpec::new(TaskKind::Iqa))
            .is_ok());
    }
}
