//! The full forecaster: fast learners, optional slow learner and the URT.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autocorrelation::DelaySet;
use crate::backbone::{Backbone, BackboneConfig, HeadKind, SlowFeatures};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::ensemble::EnsembleConfig;
use crate::tensor::{ParamStore, Tensor, TensorError};
use crate::urt::{AttentionRecord, UrtConfig, UrtLayer};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub ensemble: EnsembleConfig,
    pub urt: UrtConfig,
    /// Base seed; fast learners use `seed + 1..=M`, the slow learner
    /// `seed + 1000`, the URT `seed + 2000` unless overridden.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        self.backbone.validate()?;
        self.ensemble.validate()?;
        self.urt.validate()
    }

    /// Flattened prediction width `O · out_dim`.
    pub fn prediction_width(&self) -> usize {
        self.backbone.pred_len * self.backbone.out_dim
    }
}

/// Which parameter groups an optimiser step may touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    pub fast: Vec<bool>,
    pub slow: bool,
    pub urt: bool,
}

impl FreezeMask {
    pub fn all(model: &Mantra) -> Self {
        FreezeMask {
            fast: vec![true; model.fast.len()],
            slow: model.slow.is_some(),
            urt: true,
        }
    }

    /// Only the URT layer is trainable.
    pub fn urt_only(model: &Mantra) -> Self {
        FreezeMask {
            fast: vec![false; model.fast.len()],
            slow: false,
            urt: true,
        }
    }

    pub fn trainable_params(&self, model: &Mantra) -> usize {
        let c = model.param_counts();
        let fast: usize = c.fast.iter().zip(&self.fast).filter(|(_, &on)| on).map(|(n, _)| n).sum();
        fast + if self.slow { c.slow } else { 0 } + if self.urt { c.urt } else { 0 }
    }

    pub fn trainable_fraction(&self, model: &Mantra) -> f64 {
        self.trainable_params(model) as f64 / model.param_counts().total() as f64
    }
}

/// The mask used for drift adaptation: the URT layer only.
pub fn adaptation_freeze_mask(model: &Mantra) -> FreezeMask {
    FreezeMask::urt_only(model)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub fast: Vec<usize>,
    pub slow: usize,
    pub urt: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.fast.iter().sum::<usize>() + self.slow + self.urt
    }
}

/// Output of a frozen forward pass on one batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub output: Tensor,
    pub learners: Vec<Tensor>,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mantra {
    cfg: ModelConfig,
    pub fast: Vec<Backbone>,
    pub slow: Option<Backbone>,
    pub urt: UrtLayer,
}

impl Mantra {
    pub fn new(cfg: &ModelConfig) -> Result<Self, TensorError> {
        cfg.validate()?;
        let head = cfg.ensemble.head_kind();
        let fast = cfg
            .ensemble
            .learner_seeds(cfg.seed)
            .into_iter()
            .map(|s| Backbone::new(&cfg.backbone, head, false, s))
            .collect::<Result<Vec<_>, _>>()?;
        let slow = if cfg.ensemble.fuse_slow {
            Some(Backbone::new(&cfg.backbone, HeadKind::Plain, true, cfg.seed.wrapping_add(1000))?)
        } else {
            None
        };
        let urt = UrtLayer::new(&cfg.urt, fast.len(), cfg.prediction_width(), cfg.seed.wrapping_add(2000))?;
        Ok(Mantra {
            cfg: cfg.clone(),
            fast,
            slow,
            urt,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            fast: self.fast.iter().map(Backbone::num_params).collect(),
            slow: self.slow.as_ref().map_or(0, Backbone::num_params),
            urt: self.urt.num_params(),
        }
    }

    /// Frozen slow-learner pass: decoder features for fusion and the
    /// delays of its first encoder correlation.
    pub fn slow_pass(&self, x: &Tensor) -> Result<Option<(SlowFeatures, Vec<DelaySet>)>, TensorError> {
        match &self.slow {
            Some(g) => {
                let (f, _, delays) = g.features(x, None)?;
                Ok(Some((f, delays)))
            }
            None => Ok(None),
        }
    }

    pub fn learner_predictions(&self, x: &Tensor, slow: Option<&SlowFeatures>) -> Result<Vec<Tensor>, TensorError> {
        self.fast.iter().map(|f| f.features(x, slow).map(|r| r.1)).collect()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction, TensorError> {
        let slow = self.slow_pass(x)?;
        let learners = self.learner_predictions(x, slow.as_ref().map(|s| &s.0))?;
        let (output, attention) = self.urt.predict(&learners)?;
        Ok(Prediction {
            output,
            learners,
            attention,
        })
    }

    fn stores(&self) -> Vec<(String, &ParamStore)> {
        let mut out: Vec<(String, &ParamStore)> =
            self.fast.iter().enumerate().map(|(i, f)| (format!("fast.{i}."), f.params())).collect();
        if let Some(g) = &self.slow {
            out.push(("slow.".into(), g.params()));
        }
        out.push((String::new(), self.urt.params()));
        out
    }

    fn stores_mut(&mut self) -> Vec<(String, &mut ParamStore)> {
        let mut out: Vec<(String, &mut ParamStore)> =
            self.fast.iter_mut().enumerate().map(|(i, f)| (format!("fast.{i}."), f.params_mut())).collect();
        if let Some(g) = &mut self.slow {
            out.push(("slow.".into(), g.params_mut()));
        }
        out.push((String::new(), self.urt.params_mut()));
        out
    }

    /// Every parameter with a globally unique name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.stores()
            .into_iter()
            .flat_map(|(prefix, s)| s.iter().map(move |(n, t)| (format!("{prefix}{n}"), t.clone())).collect::<Vec<_>>())
            .collect()
    }

    /// Checkpoint holding the model config under `"model"` plus `extra`
    /// metadata entries.
    pub fn to_checkpoint(&self, extra: Value) -> Result<Checkpoint, CheckpointError> {
        let mut meta = json!({ "model": serde_json::to_value(&self.cfg)? });
        if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
            m.extend(e);
        }
        Ok(Checkpoint {
            meta,
            tensors: self.named_parameters(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let cfg: ModelConfig = serde_json::from_value(ck.meta.get("model").cloned().ok_or_else(|| {
            CheckpointError::Corrupt("metadata has no model config".into())
        })?)?;
        let mut model = Mantra::new(&cfg).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut records = ck.tensors.iter();
        for (prefix, store) in model.stores_mut() {
            let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
            for (i, n) in names.iter().enumerate() {
                let (name, t) = records
                    .next()
                    .ok_or_else(|| CheckpointError::Corrupt("fewer parameters than the config needs".into()))?;
                let want = format!("{prefix}{n}");
                let slot = &mut store.values_mut()[i];
                if *name != want || t.shape() != slot.shape() {
                    return Err(CheckpointError::Corrupt(format!(
                        "record {name} {:?} where {want} {:?} was expected",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        if records.next().is_some() {
            return Err(CheckpointError::Corrupt("more parameters than the config needs".into()));
        }
        Ok(model)
    }
}
