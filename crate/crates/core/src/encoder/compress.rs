//! Declarative compression configs: which layers to keep when dropping, and
//! which tensors to freeze during fine-tuning.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionStrategy {
    Bottom,
    Top,
    Even,
    Odd,
    Explicit(Vec<usize>),
}

/// Which `keep` layers of a source encoder to retain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub strategy: SelectionStrategy,
    pub keep: usize,
}

impl LayerSelection {
    pub fn new(strategy: SelectionStrategy, keep: usize) -> Self {
        LayerSelection { strategy, keep }
    }

    /// Resolves to strictly increasing source-layer indices in `[0, layers)`.
    ///
    /// `Even`/`Odd` spread `keep` picks across the even/odd index class by
    /// half-up rounded interpolation, matching the 12-layer reference picks
    /// Even-3 = {0, 6, 10} and Odd-3 = {1, 7, 11}.
    pub fn resolve(&self, layers: usize) -> Result<Vec<usize>, EncoderError> {
        if self.keep == 0 {
            return Err(EncoderError::Selection("keep_count must be >= 1".into()));
        }
        if self.keep > layers {
            return Err(EncoderError::Selection(format!(
                "cannot keep {} of {layers} layers",
                self.keep
            )));
        }
        let indices = match &self.strategy {
            SelectionStrategy::Bottom => (0..self.keep).collect(),
            SelectionStrategy::Top => (layers - self.keep..layers).collect(),
            SelectionStrategy::Even => spread((0..layers).step_by(2).collect(), self.keep)?,
            SelectionStrategy::Odd => spread((1..layers).step_by(2).collect(), self.keep)?,
            SelectionStrategy::Explicit(picks) => {
                if picks.len() != self.keep {
                    return Err(EncoderError::Selection(format!(
                        "{} explicit indices for keep_count {}",
                        picks.len(),
                        self.keep
                    )));
                }
                for w in picks.windows(2) {
                    if w[0] >= w[1] {
                        return Err(EncoderError::Selection(
                            "explicit indices must be strictly increasing".into(),
                        ));
                    }
                }
                if let Some(&last) = picks.last() {
                    if last >= layers {
                        return Err(EncoderError::Selection(format!(
                            "index {last} out of range for {layers} layers"
                        )));
                    }
                }
                picks.clone()
            }
        };
        Ok(indices)
    }
}

fn spread(candidates: Vec<usize>, keep: usize) -> Result<Vec<usize>, EncoderError> {
    if keep > candidates.len() {
        return Err(EncoderError::Selection(format!(
            "cannot keep {keep} layers from a parity class of {}",
            candidates.len()
        )));
    }
    if keep == 1 {
        // midpoint convention
        return Ok(vec![candidates[(candidates.len() - 1) / 2]]);
    }
    let last = (candidates.len() - 1) as f64;
    let step = last / (keep - 1) as f64;
    Ok((0..keep).map(|i| candidates[(i as f64 * step + 0.5).floor() as usize]).collect())
}

/// Which tensors stay at their initial values during fine-tuning.
///
/// `fm_i r_j`-style freezing pins the bottom-most `i` message and `j`
/// response layer blocks plus, on each side with a nonzero count, that
/// side's subword (token) embedding table. Position/segment embeddings and
/// the embedding layer-norm keep training. `all` freezes every tensor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub msg_layers: usize,
    pub rsp_layers: usize,
    pub freeze_msg_embeddings: bool,
    pub freeze_rsp_embeddings: bool,
    pub freeze_all: bool,
}

impl FreezeSpec {
    pub fn none() -> Self {
        FreezeSpec::default()
    }

    /// The paper-notation `fm_i r_j` reading: bottom `i`/`j` layers frozen,
    /// embeddings frozen on each side that freezes at least one layer.
    pub fn fm(msg_layers: usize, rsp_layers: usize) -> Self {
        FreezeSpec {
            msg_layers,
            rsp_layers,
            freeze_msg_embeddings: msg_layers > 0,
            freeze_rsp_embeddings: rsp_layers > 0,
            freeze_all: false,
        }
    }

    /// `f_emb`: both token-embedding tables frozen, all layers trainable.
    pub fn emb_only() -> Self {
        FreezeSpec {
            msg_layers: 0,
            rsp_layers: 0,
            freeze_msg_embeddings: true,
            freeze_rsp_embeddings: true,
            freeze_all: false,
        }
    }

    /// Every tensor frozen; training cannot change the model.
    pub fn all() -> Self {
        FreezeSpec { freeze_all: true, ..FreezeSpec::default() }
    }

    pub fn is_none(&self) -> bool {
        *self == FreezeSpec::none()
    }

    pub fn validate(
        &self,
        msg_cfg: &EncoderConfig,
        rsp_cfg: &EncoderConfig,
    ) -> Result<(), EncoderError> {
        if self.msg_layers > msg_cfg.num_layers {
            return Err(EncoderError::Freeze(format!(
                "{} frozen message layers exceed {}",
                self.msg_layers, msg_cfg.num_layers
            )));
        }
        if self.rsp_layers > rsp_cfg.num_layers {
            return Err(EncoderError::Freeze(format!(
                "{} frozen response layers exceed {}",
                self.rsp_layers, rsp_cfg.num_layers
            )));
        }
        Ok(())
    }

    /// The exact frozen tensor names, `msg.`/`rsp.`-prefixed.
    pub fn frozen_keys(
        &self,
        msg_cfg: &EncoderConfig,
        rsp_cfg: &EncoderConfig,
    ) -> BTreeSet<String> {
        let mut keys = BTreeSet::new();
        if self.freeze_all {
            for (key, _) in msg_cfg.key_schema() {
                keys.insert(format!("msg.{key}"));
            }
            for (key, _) in rsp_cfg.key_schema() {
                keys.insert(format!("rsp.{key}"));
            }
            return keys;
        }
        let sides: [(&str, &EncoderConfig, usize, bool); 2] = [
            ("msg", msg_cfg, self.msg_layers, self.freeze_msg_embeddings),
            ("rsp", rsp_cfg, self.rsp_layers, self.freeze_rsp_embeddings),
        ];
        for (prefix, cfg, layers, emb) in sides {
            if emb {
                keys.insert(format!("{prefix}.emb.tok"));
            }
            for n in 0..layers {
                for key in cfg.layer_keys(n) {
                    keys.insert(format!("{prefix}.{key}"));
                }
            }
        }
        keys
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::count_params;

    #[test]
    fn reference_selections_on_twelve_layers() {
        let l = 12;
        assert_eq!(LayerSelection::new(SelectionStrategy::Bottom, 3).resolve(l).unwrap(), vec![0, 1, 2]);
        assert_eq!(LayerSelection::new(SelectionStrategy::Top, 3).resolve(l).unwrap(), vec![9, 10, 11]);
        assert_eq!(LayerSelection::new(SelectionStrategy::Even, 3).resolve(l).unwrap(), vec![0, 6, 10]);
        assert_eq!(LayerSelection::new(SelectionStrategy::Odd, 3).resolve(l).unwrap(), vec![1, 7, 11]);
    }

    #[test]
    fn bottom_full_keep_is_identity() {
        let sel = LayerSelection::new(SelectionStrategy::Bottom, 5);
        assert_eq!(sel.resolve(5).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn explicit_bounds_checked() {
        let sel = LayerSelection::new(SelectionStrategy::Explicit(vec![0, 4, 12]), 3);
        assert!(sel.resolve(12).is_err());
        let sel = LayerSelection::new(SelectionStrategy::Explicit(vec![4, 2]), 2);
        assert!(sel.resolve(12).is_err());
        let sel = LayerSelection::new(SelectionStrategy::Explicit(vec![2, 4]), 2);
        assert_eq!(sel.resolve(12).unwrap(), vec![2, 4]);
    }

    #[test]
    fn keep_zero_or_too_many_rejected() {
        assert!(LayerSelection::new(SelectionStrategy::Bottom, 0).resolve(4).is_err());
        assert!(LayerSelection::new(SelectionStrategy::Bottom, 5).resolve(4).is_err());
        assert!(LayerSelection::new(SelectionStrategy::Odd, 3).resolve(4).is_err());
    }

    #[test]
    fn freeze_key_sets_cover_exactly_the_named_blocks() {
        let m = EncoderConfig::new(6, 8, 2, 16, 24, 12).unwrap();
        let r = EncoderConfig::new(12, 8, 2, 16, 24, 12).unwrap();
        let keys = FreezeSpec::fm(3, 6).frozen_keys(&m, &r);
        assert!(keys.contains("msg.emb.tok"));
        assert!(keys.contains("rsp.emb.tok"));
        assert!(!keys.contains("msg.emb.pos"));
        assert!(!keys.contains("msg.emb.ln.g"));
        assert!(keys.contains("msg.layer.2.ff.w1"));
        assert!(!keys.contains("msg.layer.3.ff.w1"));
        assert!(keys.contains("rsp.layer.5.ln2.b"));
        assert!(!keys.contains("rsp.layer.6.attn.q.w"));

        let emb = FreezeSpec::emb_only().frozen_keys(&m, &r);
        assert_eq!(
            emb.iter().map(String::as_str).collect::<Vec<_>>(),
            vec!["msg.emb.tok", "rsp.emb.tok"]
        );

        let all = FreezeSpec::all().frozen_keys(&m, &r);
        assert_eq!(all.len(), m.key_schema().len() + r.key_schema().len());
    }

    #[test]
    fn fm_zero_side_leaves_that_side_trainable() {
        let m = EncoderConfig::new(6, 8, 2, 16, 24, 12).unwrap();
        let r = EncoderConfig::new(12, 8, 2, 16, 24, 12).unwrap();
        let keys = FreezeSpec::fm(0, 6).frozen_keys(&m, &r);
        assert!(!keys.iter().any(|k| k.starts_with("msg.")));
        assert!(keys.contains("rsp.emb.tok"));
    }

    #[test]
    fn trainable_counts_reproduce_reference_table() {
        let m6 = EncoderConfig::bert_base(6);
        let r12 = EncoderConfig::bert_base(12);
        let rows: [(FreezeSpec, u64); 7] = [
            (FreezeSpec::fm(3, 0), 130_551_552),
            (FreezeSpec::emb_only(), 128_374_272),
            (FreezeSpec::fm(0, 6), 109_287_936),
            (FreezeSpec::fm(3, 3), 85_847_040),
            (FreezeSpec::fm(3, 6), 64_583_424),
            (FreezeSpec::fm(6, 6), 43_319_808),
            (FreezeSpec::fm(3, 12), 22_056_192),
        ];
        for (spec, expected) in rows {
            let (_, trainable) = count_params(&m6, &r12, Some(&spec));
            assert_eq!(trainable, expected, "{spec:?}");
        }
        let (_, zero) = count_params(&m6, &r12, Some(&FreezeSpec::all()));
        assert_eq!(zero, 0);
    }
}
