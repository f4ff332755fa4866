//! Top-down decoder producing the full-resolution saliency map.
//!
//! ```text
//! f_s4 = relu(conv(up2(proj4(f4))))                      stride 32 -> 16
//! f_si = relu(conv(up2(proj_i(f_i) + f_s(i+1))))  i=3,2  stride 16 -> 8 -> 4
//! S    = sigmoid(head(up4(relu(mid(f_s2 + proj1(f1))))))  stride 4 -> 1
//! ```
//!
//! Every `proj_i` is a 3x3 conv onto the shared decoder width so the sums
//! are well typed.

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{ensure, Result};
use crate::params::{conv_specs, Binding, ParamSpec};

pub const NAMESPACE: &str = "decoder.";
pub const DEFAULT_WIDTH: usize = 64;

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoder {
    channels: [usize; 4],
    width: usize,
}

/// Intermediate maps kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct DecoderTrace {
    pub fs4: Var,
    pub fs3: Var,
    pub fs2: Var,
    pub logits: Var,
}

impl Decoder {
    pub fn new(channels: [usize; 4], width: usize) -> Self {
        Self { channels, width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.width;
        let mut specs = Vec::new();
        for (i, &c) in self.channels.iter().enumerate() {
            specs.extend(conv_specs(&format!("decoder.proj{}", i + 1), c, d, 3, 1.0));
        }
        for i in [4, 3, 2] {
            specs.extend(conv_specs(&format!("decoder.fuse{i}"), d, d, 3, RELU_GAIN));
        }
        specs.extend(conv_specs("decoder.mid", d, d, 3, RELU_GAIN));
        specs.extend(conv_specs("decoder.head", d, 1, 3, 1.0));
        specs
    }

    fn conv(g: &mut Graph, p: &Binding, name: &str, x: Var) -> Var {
        let w = p.var(&format!("{name}.weight"));
        let b = p.var(&format!("{name}.bias"));
        g.conv2d(x, w, Some(b), 1, 1)
    }

    fn checked_add(g: &mut Graph, a: Var, b: Var, what: &str) -> Result<Var> {
        ensure!(
            g.shape(a) == g.shape(b),
            "{what}: operands {:?} and {:?} are at different strides",
            g.shape(a),
            g.shape(b)
        );
        Ok(g.add(a, b))
    }

    /// `levels = [f1, f~2, f~3, f~4]`; returns the saliency map `[N,1,H,W]`.
    pub fn decode(&self, g: &mut Graph, p: &Binding, levels: [Var; 4]) -> Result<(Var, DecoderTrace)> {
        let [f1, f2, f3, f4] = levels;
        let t4 = Self::conv(g, p, "decoder.proj4", f4);
        let u = g.upsample(t4, 2);
        let c = Self::conv(g, p, "decoder.fuse4", u);
        let fs4 = g.relu(c);

        let t3 = Self::conv(g, p, "decoder.proj3", f3);
        let s3 = Self::checked_add(g, t3, fs4, "level-3 fusion")?;
        let u = g.upsample(s3, 2);
        let c = Self::conv(g, p, "decoder.fuse3", u);
        let fs3 = g.relu(c);

        let t2 = Self::conv(g, p, "decoder.proj2", f2);
        let s2 = Self::checked_add(g, t2, fs3, "level-2 fusion")?;
        let u = g.upsample(s2, 2);
        let c = Self::conv(g, p, "decoder.fuse2", u);
        let fs2 = g.relu(c);

        let t1 = Self::conv(g, p, "decoder.proj1", f1);
        let s1 = Self::checked_add(g, fs2, t1, "detail fusion")?;
        let m = Self::conv(g, p, "decoder.mid", s1);
        let m = g.relu(m);
        let u = g.upsample(m, 4);
        let logits = Self::conv(g, p, "decoder.head", u);
        let s = g.sigmoid(logits);
        Ok((
            s,
            DecoderTrace {
                fs4,
                fs3,
                fs2,
                logits,
            },
        ))
    }
}

/// Bilinear upsampling of a `[N,C,H,W]` tensor by 2 or 4.
pub fn upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    ensure!(factor == 2 || factor == 4, "upsample factor must be 2 or 4, got {factor}");
    ensure!(x.ndim() == 4, "upsample expects [N,C,H,W], got {:?}", x.shape());
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let u = g.upsample(v, factor);
    Ok(g.value(u).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CH: [usize; 4] = [4, 8, 8, 16];

    fn level_inputs(g: &mut Graph, rng: &mut ChaCha8Rng, hw: usize) -> [Var; 4] {
        let mut v = Vec::new();
        for (i, s) in [4usize, 8, 16, 32].iter().enumerate() {
            let t = ArrayD::from_shape_fn(IxDyn(&[1, CH[i], hw / s, hw / s]), |_| {
                rng.random_range(-1.0..1.0)
            });
            v.push(g.input(t));
        }
        [v[0], v[1], v[2], v[3]]
    }

    fn setup() -> (Decoder, ParamStore) {
        let dec = Decoder::new(CH, 8);
        let p = ParamStore::init(&dec.param_specs(), &mut ChaCha8Rng::seed_from_u64(7));
        (dec, p)
    }

    #[test]
    fn stride_chain_and_output_resolution() {
        let (dec, params) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| false);
        let lv = level_inputs(&mut g, &mut rng, 64);
        let (s, tr) = dec.decode(&mut g, &p, lv).unwrap();
        // 64 / stride: f4 at 32 -> f_s4 at 16 -> f_s3 at 8 -> f_s2 at 4 -> map at 1
        assert_eq!(&g.shape(lv[3])[2..], &[2, 2]);
        assert_eq!(&g.shape(tr.fs4)[2..], &[4, 4]);
        assert_eq!(&g.shape(tr.fs3)[2..], &[8, 8]);
        assert_eq!(&g.shape(tr.fs2)[2..], &[16, 16]);
        assert_eq!(g.shape(s), &[1, 1, 64, 64]);
        assert!(g.value(s).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_features_without_bias_give_half() {
        let (dec, mut params) = setup();
        let names: Vec<String> = params.names().filter(|n| n.ends_with("bias")).cloned().collect();
        for n in names {
            params.get_mut(&n).unwrap().fill(0.0);
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| false);
        let mut v = Vec::new();
        for (i, s) in [4usize, 8, 16, 32].iter().enumerate() {
            v.push(g.input(ArrayD::zeros(IxDyn(&[1, CH[i], 64 / s, 64 / s]))));
        }
        let (s, _) = dec.decode(&mut g, &p, [v[0], v[1], v[2], v[3]]).unwrap();
        assert!(g.value(s).iter().all(|&x| x == 0.5));
    }

    #[test]
    fn detail_branch_is_live() {
        let (dec, params) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| false);
        let lv = level_inputs(&mut g, &mut rng, 64);
        let zero1 = g.input(ArrayD::zeros(IxDyn(g.shape(lv[0]))));
        let (a, _) = dec.decode(&mut g, &p, lv).unwrap();
        let (b, _) = dec.decode(&mut g, &p, [zero1, lv[1], lv[2], lv[3]]).unwrap();
        let delta = (g.value(a) - g.value(b)).mapv(f64::abs).sum();
        assert!(delta > 0.0);
    }

    #[test]
    fn mismatched_levels_are_rejected() {
        let (dec, params) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| false);
        let lv = level_inputs(&mut g, &mut rng, 64);
        let wrong = g.input(ArrayD::zeros(IxDyn(&[1, CH[2], 8, 8])));
        assert!(dec.decode(&mut g, &p, [lv[0], lv[1], wrong, lv[3]]).is_err());
    }

    #[test]
    fn upsample_preserves_constants_and_sizes() {
        let x = ArrayD::from_elem(IxDyn(&[1, 2, 12, 12]), 0.37);
        let u = upsample(&x, 2).unwrap();
        assert_eq!(u.shape(), &[1, 2, 24, 24]);
        assert!(u.iter().all(|&v| (v - 0.37).abs() < 1e-15));
        assert!(upsample(&x, 3).is_err());
    }

    #[test]
    fn upsample_matches_closed_form_on_ramp() {
        // f(y, x) = 10 y + x on a 4x4 grid; with half-pixel centres the
        // output sample (oy, ox) reads source coordinate
        // clamp((o + 0.5) / 2 - 0.5, 0, 3) along each axis, and bilinear
        // interpolation of an affine function is exact.
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |i| 10.0 * i[2] as f64 + i[3] as f64);
        let u = upsample(&x, 2).unwrap();
        let src = |o: usize| ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 3.0);
        for oy in 0..8 {
            for ox in 0..8 {
                let expect = 10.0 * src(oy) + src(ox);
                assert!((u[[0, 0, oy, ox]] - expect).abs() < 1e-6);
            }
        }
    }
}
