//! Closed-form compute cost of a forward pass.
//!
//! Counts multiply-accumulates with 1 MAC = 1 FLOP, the convention used for
//! transformer cost reporting. Normalizations, softmax, activations, and
//! pooling are not counted; matrix products dominate.

use super::VitConfig;

/// Per-component MAC counts for one image.
#[derive(Debug, Clone)]
pub struct FlopsBreakdown {
    items: Vec<(String, u64)>,
}

impl FlopsBreakdown {
    pub fn items(&self) -> &[(String, u64)] {
        &self.items
    }

    pub fn total(&self) -> u64 {
        self.items.iter().map(|(_, v)| v).sum()
    }

    /// Total in units of 1e9 operations.
    pub fn giga(&self) -> f64 {
        self.total() as f64 / 1e9
    }
}

/// Analytic cost of the configured model, including heads when present.
pub fn vit_flops(cfg: &VitConfig) -> FlopsBreakdown {
    let t = cfg.num_patches() as u64;
    let s = if cfg.uses_class_token() { t + 1 } else { t };
    let d = cfg.dim as u64;
    let h = cfg.mlp_hidden() as u64;
    let depth = cfg.depth as u64;

    let mut items = vec![("patch_embed".to_string(), t * cfg.patch_dim() as u64 * d)];
    items.push(("attention.qkv".into(), depth * s * d * 3 * d));
    items.push(("attention.scores".into(), depth * s * s * d));
    items.push(("attention.values".into(), depth * s * s * d));
    items.push(("attention.proj".into(), depth * s * d * d));
    items.push(("mlp".into(), depth * 2 * s * d * h));

    if let Some(hs) = &cfg.head_spec {
        items.push(("heads.projector".into(), mlp_macs(&hs.projector)));
        if let Some(pred) = &hs.predictor {
            items.push(("heads.predictor".into(), mlp_macs(pred)));
        }
        if let Some(k) = hs.prototypes {
            let out = *hs.projector.last().expect("validated") as u64;
            items.push(("heads.prototypes".into(), out * k as u64));
        }
    }
    FlopsBreakdown { items }
}

fn mlp_macs(dims: &[usize]) -> u64 {
    dims.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{HeadSpec, Pooling};

    #[test]
    fn vit_s_8_at_40_hand_count() {
        // patch embed 25*192*384, 12 blocks of
        // qkv 26*384*1152 + 2*26^2*384 + proj 26*384^2 + mlp 2*26*384*1536
        let fl = vit_flops(&VitConfig::vit_s_8());
        assert_eq!(fl.total(), 560_148_480);
        assert!((fl.giga() - 0.5).abs() / 0.5 < 0.3);
    }

    #[test]
    fn depth_zero_leaves_patch_embed_and_heads() {
        let mut cfg = VitConfig::vit_s_8();
        cfg.depth = 0;
        cfg.head_spec = Some(HeadSpec::contrastive(cfg.dim));
        let fl = vit_flops(&cfg);
        let expect_heads = (384 * 4096 + 4096 * 4096 + 4096 * 256) + (256 * 4096 + 4096 * 256);
        assert_eq!(fl.total(), 25 * 192 * 384 + expect_heads);
    }

    #[test]
    fn doubling_depth_doubles_block_terms() {
        let mut c6 = VitConfig::vit_s_8();
        c6.depth = 6;
        let f6 = vit_flops(&c6);
        let f12 = vit_flops(&VitConfig::vit_s_8());
        for ((n6, v6), (n12, v12)) in f6.items().iter().zip(f12.items()) {
            assert_eq!(n6, n12);
            if n6.starts_with("attention") || n6 == "mlp" {
                assert_eq!(2 * v6, *v12);
            } else {
                assert_eq!(v6, v12);
            }
        }
    }

    #[test]
    fn center_pooling_drops_the_class_token_row() {
        let mut with_cls = VitConfig::vit_s_8();
        with_cls.pooling = Pooling::ClassToken;
        let mut center = VitConfig::vit_s_8();
        center.pooling = Pooling::CenterTokens { grid: 3 };
        assert!(vit_flops(&with_cls).total() > vit_flops(&center).total());
    }
}
