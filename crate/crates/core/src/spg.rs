//! Switchable prompt generation.
//!
//! One block per pyramid level:
//!
//! ```text
//! mu = sigmoid(mask_conv(f_a))
//! P  = out_conv(f_r * mu + f_a)
//! ```
//!
//! With an RGB-only task the auxiliary input is the RGB image itself, so the
//! frozen backbone yields `f_a == f_r` and the same computation becomes the
//! single-modal refinement `out_conv(f_r * sigmoid(mask_conv(f_r)) + f_r)`.
//! There is no branch on modality anywhere in this module.

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::params::{conv_specs, total_numel, Binding, Init, ParamSpec, ParamStore};
use crate::partition::ParameterPartition;

pub const NAMESPACE: &str = "spg.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpgBlock {
    pub level: usize,
    pub channels: usize,
}

impl SpgBlock {
    pub fn new(level: usize, channels: usize) -> Self {
        Self { level, channels }
    }

    pub fn prefix(&self) -> String {
        format!("spg.level{}", self.level)
    }

    /// `mask_conv` gets fan-in init; `out_conv` starts at zero so prompt
    /// tuning begins exactly at the pre-trained model.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.channels;
        let p = self.prefix();
        let mut specs = conv_specs(&format!("{p}.mask_conv"), c, c, 3, 1.0);
        specs.push(ParamSpec::new(format!("{p}.out_conv.weight"), &[c, c, 3, 3], Init::Zeros));
        specs.push(ParamSpec::new(format!("{p}.out_conv.bias"), &[c], Init::Zeros));
        specs
    }

    /// `2 * (9 C^2 + C)`.
    pub fn closed_form_count(channels: usize) -> usize {
        2 * (9 * channels * channels + channels)
    }

    pub fn prompt(&self, g: &mut Graph, p: &Binding, f_r: Var, f_a: Var) -> Result<Var> {
        ensure!(
            g.shape(f_r) == g.shape(f_a),
            "level {}: rgb feature {:?} and auxiliary feature {:?} differ",
            self.level,
            g.shape(f_r),
            g.shape(f_a)
        );
        ensure!(
            g.shape(f_r).get(1) == Some(&self.channels),
            "level {}: block expects {} channels, feature has shape {:?}",
            self.level,
            self.channels,
            g.shape(f_r)
        );
        let pre = self.prefix();
        let m = g.conv2d(
            f_a,
            p.var(&format!("{pre}.mask_conv.weight")),
            Some(p.var(&format!("{pre}.mask_conv.bias"))),
            1,
            1,
        );
        let mu = g.sigmoid(m);
        let guided = g.mul(f_r, mu);
        let fused = g.add(guided, f_a);
        Ok(g.conv2d(
            fused,
            p.var(&format!("{pre}.out_conv.weight")),
            Some(p.var(&format!("{pre}.out_conv.bias"))),
            1,
            1,
        ))
    }
}

/// The four per-level blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spg {
    blocks: [SpgBlock; 4],
}

impl Spg {
    pub fn new(channels: [usize; 4]) -> Self {
        Self {
            blocks: std::array::from_fn(|i| SpgBlock::new(i + 1, channels[i])),
        }
    }

    pub fn blocks(&self) -> &[SpgBlock; 4] {
        &self.blocks
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.blocks.iter().flat_map(|b| b.param_specs()).collect()
    }

    pub fn prompts(&self, g: &mut Graph, p: &Binding, pyr_r: &[Var], pyr_a: &[Var]) -> Result<[Var; 4]> {
        ensure!(
            pyr_r.len() == 4 && pyr_a.len() == 4,
            "prompt generation needs two 4-level pyramids, got {} and {}",
            pyr_r.len(),
            pyr_a.len()
        );
        let mut out = [pyr_r[0]; 4];
        for (i, block) in self.blocks.iter().enumerate() {
            out[i] = block.prompt(g, p, pyr_r[i], pyr_a[i])?;
        }
        Ok(out)
    }
}

/// Evaluates one block outside any training graph.
pub fn generate_prompt(block: &SpgBlock, params: &ParamStore, f_r: &Tensor, f_a: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.filter_prefix(&block.prefix()).bind(&mut g, |_| false);
    let r = g.input(f_r.clone());
    let a = g.input(f_a.clone());
    let out = block.prompt(&mut g, &p, r, a)?;
    Ok(g.value(out).clone())
}

/// Evaluates all four blocks on a pair of pyramids.
pub fn generate_all(spg: &Spg, params: &ParamStore, pyr_r: &[Tensor], pyr_a: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let p = params.filter_prefix(NAMESPACE).bind(&mut g, |_| false);
    let r: Vec<Var> = pyr_r.iter().map(|t| g.input(t.clone())).collect();
    let a: Vec<Var> = pyr_a.iter().map(|t| g.input(t.clone())).collect();
    let prompts = spg.prompts(&mut g, &p, &r, &a)?;
    Ok(prompts.iter().map(|v| g.value(*v).clone()).collect())
}

/// Per-level parameter counts, summed over both convs of each block.
pub fn level_param_counts(spg: &Spg) -> [usize; 4] {
    std::array::from_fn(|i| total_numel(&spg.blocks[i].param_specs()))
}

/// `trainable / (trainable + frozen)`.
pub fn count_trainable_fraction(partition: &ParameterPartition) -> Result<f64> {
    partition.check_disjoint()?;
    let total = partition.trainable_count() + partition.frozen_count();
    if total == 0 {
        return Err(Error::Accounting("partition holds no parameters".into()));
    }
    Ok(partition.trainable_count() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_convs_give_zero_prompt() {
        let block = SpgBlock::new(2, 3);
        let mut params = ParamStore::init(&block.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        params.get_mut("spg.level2.mask_conv.weight").unwrap().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_t(&mut rng, &[1, 3, 4, 4]);
        let a = rand_t(&mut rng, &[1, 3, 4, 4]);
        let p = generate_prompt(&block, &params, &f, &a).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_out_conv_exposes_half_rgb_plus_aux() {
        // mask_conv = 0 gives mu = 0.5; a centred delta kernel makes out_conv
        // the identity, so P = 0.5 f_r + f_a elementwise.
        let block = SpgBlock::new(1, 1);
        let mut params = ParamStore::init(&block.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        params.get_mut("spg.level1.mask_conv.weight").unwrap().fill(0.0);
        params.get_mut("spg.level1.out_conv.weight").unwrap()[[0, 0, 1, 1]] = 1.0;
        let f_r = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |i| (i[2] * 4 + i[3]) as f64 * 0.25);
        let f_a = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |i| 1.0 - (i[2] + i[3]) as f64 * 0.125);
        let p = generate_prompt(&block, &params, &f_r, &f_a).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = 0.5 * f_r[[0, 0, y, x]] + f_a[[0, 0, y, x]];
                assert_eq!(p[[0, 0, y, x]], expect);
            }
        }
    }

    #[test]
    fn closed_form_counts_for_toy_widths() {
        let spg = Spg::new([16, 32, 64, 128]);
        let counts = level_param_counts(&spg);
        assert_eq!(counts, [4640, 18496, 73856, 295168]);
        for (i, c) in [16, 32, 64, 128].iter().enumerate() {
            assert_eq!(counts[i], SpgBlock::closed_form_count(*c));
        }
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let block = SpgBlock::new(1, 2);
        let params = ParamStore::init(&block.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        let a = ArrayD::zeros(IxDyn(&[1, 2, 4, 4]));
        let b = ArrayD::zeros(IxDyn(&[1, 2, 2, 4]));
        assert!(generate_prompt(&block, &params, &a, &b).is_err());
    }

    #[test]
    fn generate_all_rejects_short_pyramid() {
        let spg = Spg::new([2, 2, 2, 2]);
        let params = ParamStore::init(&spg.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        let l = vec![ArrayD::zeros(IxDyn(&[1, 2, 4, 4])); 3];
        assert!(generate_all(&spg, &params, &l, &l).is_err());
    }
}
