//! Per-level token-space transformer encoders for pyramid levels 2–4.
//!
//! Each level has its own pre-norm stack of `L` layers (self-attention and a
//! GELU feed-forward block, both residual) and a learned positional
//! embedding that starts at zero. Level 1 never enters a stack.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::STRIDES;
use crate::error::{ensure, Result};
use crate::params::{linear_specs, Binding, Init, ParamSpec};

pub const NAMESPACE: &str = "transformer.";
pub const MLP_RATIO: usize = 4;

/// How prompts enter a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Prompt added elementwise to the level features.
    Sum,
    /// Prompt pooled to one token, appended, and stripped after the stack.
    Concat,
}

/// Attention heads for a width: `D / 32` (at least one), lowered until it
/// divides `D`.
pub fn heads_for(width: usize) -> usize {
    let mut h = (width / 32).max(1);
    while !width.is_multiple_of(h) {
        h -= 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerStack {
    layers: usize,
    channels: [usize; 4],
    input_hw: (usize, usize),
}

fn prefix(level: usize) -> String {
    format!("transformer.TE{level}")
}

impl TransformerStack {
    pub fn new(layers: usize, channels: [usize; 4], input_hw: (usize, usize)) -> Self {
        Self {
            layers,
            channels,
            input_hw,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    fn tokens(&self, level: usize) -> usize {
        let s = STRIDES[level - 1];
        (self.input_hw.0 / s) * (self.input_hw.1 / s)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for level in 2..=4 {
            let d = self.channels[level - 1];
            let p = prefix(level);
            specs.push(ParamSpec::new(format!("{p}.pos"), &[self.tokens(level), d], Init::Zeros));
            for j in 0..self.layers {
                let l = format!("{p}.layer{j}");
                specs.push(ParamSpec::new(format!("{l}.ln1.weight"), &[d], Init::Ones));
                specs.push(ParamSpec::new(format!("{l}.ln1.bias"), &[d], Init::Zeros));
                specs.extend(linear_specs(&format!("{l}.attn.qkv"), d, 3 * d));
                specs.extend(linear_specs(&format!("{l}.attn.out"), d, d));
                specs.push(ParamSpec::new(format!("{l}.ln2.weight"), &[d], Init::Ones));
                specs.push(ParamSpec::new(format!("{l}.ln2.bias"), &[d], Init::Zeros));
                specs.extend(linear_specs(&format!("{l}.mlp.fc1"), d, MLP_RATIO * d));
                specs.extend(linear_specs(&format!("{l}.mlp.fc2"), MLP_RATIO * d, d));
            }
        }
        specs
    }

    fn dense(g: &mut Graph, p: &Binding, name: &str, x: Var) -> Var {
        let w = p.var(&format!("{name}.weight"));
        let b = p.var(&format!("{name}.bias"));
        g.linear(x, w, Some(b))
    }

    /// Runs the level's layers over `tokens: [N, T, D]`, returning the output
    /// of every layer (the last entry is the stack output; with `L = 0` the
    /// list holds only the input).
    pub fn run_layers(&self, g: &mut Graph, p: &Binding, level: usize, tokens: Var) -> Vec<Var> {
        let d = self.channels[level - 1];
        let heads = heads_for(d);
        let pre = prefix(level);
        let mut outs = vec![tokens];
        let mut x = tokens;
        for j in 0..self.layers {
            let l = format!("{pre}.layer{j}");
            let h = g.layer_norm(
                x,
                p.var(&format!("{l}.ln1.weight")),
                p.var(&format!("{l}.ln1.bias")),
            );
            let qkv = Self::dense(g, p, &format!("{l}.attn.qkv"), h);
            let a = g.attention(qkv, heads);
            let a = Self::dense(g, p, &format!("{l}.attn.out"), a);
            x = g.add(x, a);
            let h = g.layer_norm(
                x,
                p.var(&format!("{l}.ln2.weight")),
                p.var(&format!("{l}.ln2.bias")),
            );
            let h = Self::dense(g, p, &format!("{l}.mlp.fc1"), h);
            let h = g.gelu(h);
            let h = Self::dense(g, p, &format!("{l}.mlp.fc2"), h);
            x = g.add(x, h);
            outs.push(x);
        }
        outs
    }

    fn check_level(&self, g: &Graph, level: usize, f: Var) -> Result<()> {
        ensure!(
            (2..=4).contains(&level),
            "level {level} does not pass through a transformer stack (levels 2-4 only)"
        );
        let s = g.shape(f);
        let st = STRIDES[level - 1];
        let expect = [
            s.first().copied().unwrap_or(0),
            self.channels[level - 1],
            self.input_hw.0 / st,
            self.input_hw.1 / st,
        ];
        ensure!(
            s == expect,
            "level {level} feature has shape {s:?}, stack expects {expect:?}"
        );
        Ok(())
    }

    /// `reshape(TE_level(flatten(f) + pos))`, optionally with extra tokens
    /// appended before the stack and removed after it.
    pub fn encode_level_with(
        &self,
        g: &mut Graph,
        p: &Binding,
        f: Var,
        level: usize,
        extra: Option<Var>,
    ) -> Result<Var> {
        self.check_level(g, level, f)?;
        let (h, w) = (g.shape(f)[2], g.shape(f)[3]);
        let n_img = h * w;
        let tokens = g.to_tokens(f);
        let mut x = g.add_broadcast(tokens, p.var(&format!("{}.pos", prefix(level))));
        if let Some(e) = extra {
            let es = g.shape(e).to_vec();
            ensure!(
                es.len() == 3 && es[0] == g.shape(x)[0] && es[2] == g.shape(x)[2],
                "extra tokens {es:?} do not match level {level} tokens {:?}",
                g.shape(x)
            );
            x = g.concat_tokens(x, e);
        }
        let out = *self.run_layers(g, p, level, x).last().unwrap();
        let out = if extra.is_some() {
            g.slice_tokens(out, 0, n_img)
        } else {
            out
        };
        Ok(g.from_tokens(out, h, w))
    }

    pub fn encode_level(&self, g: &mut Graph, p: &Binding, f: Var, level: usize) -> Result<Var> {
        self.encode_level_with(g, p, f, level, None)
    }

    /// Transforms levels 2–4 and passes level 1 through. With prompts,
    /// level 1 receives `f1 + P1`; levels 2–4 receive prompts according to
    /// `injection`.
    pub fn encode_pyramid(
        &self,
        g: &mut Graph,
        p: &Binding,
        levels: [Var; 4],
        prompts: Option<[Var; 4]>,
        injection: Injection,
    ) -> Result<[Var; 4]> {
        if let Some(ps) = prompts {
            for (i, (&f, &pr)) in levels.iter().zip(ps.iter()).enumerate() {
                ensure!(
                    g.shape(f) == g.shape(pr),
                    "prompt for level {} has shape {:?}, feature has {:?}",
                    i + 1,
                    g.shape(pr),
                    g.shape(f)
                );
            }
        }
        let mut out = levels;
        if let Some(ps) = prompts {
            out[0] = g.add(levels[0], ps[0]);
        }
        for level in 2..=4 {
            let f = levels[level - 1];
            out[level - 1] = match (prompts, injection) {
                (None, _) => self.encode_level(g, p, f, level)?,
                (Some(ps), Injection::Sum) => {
                    let s = g.add(f, ps[level - 1]);
                    self.encode_level(g, p, s, level)?
                }
                (Some(ps), Injection::Concat) => {
                    let tok = g.pool_token(ps[level - 1]);
                    self.encode_level_with(g, p, f, level, Some(tok))?
                }
            };
        }
        Ok(out)
    }
}
