//! One-shot aggregation modules with residual connection and channel attention.

use rand::Rng;

use super::config::{Attention, OsaConfig};
use crate::error::{shape_err, Result};
use crate::params::{Bound, Conv, Init, Linear, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

/// eSE gate: `x_div ⊗ σ(W·gap(x_div) + b)` with a square C×C weight.
pub fn ese_forward<T: Scalar>(tape: &mut Tape<T>, x_div: Var, w: Var, b: Var) -> Result<Var> {
    let [n, c, _, _] = tape.value(x_div).dims4()?;
    if tape.shape(w) != [c, c] {
        return Err(shape_err(
            "ese_forward",
            format!("weight {:?} is not {c}x{c}", tape.shape(w)),
        ));
    }
    let pooled = tape.global_avg_pool(x_div)?;
    let pooled = tape.reshape(pooled, [n, c])?;
    let logits = tape.fully_connected(pooled, w, b)?;
    let gate = tape.sigmoid(logits)?;
    tape.scale_channels(x_div, gate)
}

/// SE gate: `x ⊗ σ(W₂·relu(W₁·gap(x) + b₁) + b₂)`.
pub fn se_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, (w1, b1): (Var, Var), (w2, b2): (Var, Var)) -> Result<Var> {
    let [n, c, _, _] = tape.value(x).dims4()?;
    if c == 0 {
        return Err(shape_err("se_forward", "zero channels"));
    }
    let pooled = tape.global_avg_pool(x)?;
    let pooled = tape.reshape(pooled, [n, c])?;
    let hidden = tape.fully_connected(pooled, w1, b1)?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.fully_connected(hidden, w2, b2)?;
    let gate = tape.sigmoid(logits)?;
    tape.scale_channels(x, gate)
}

/// Hidden width of an SE block: `max(1, ⌊C/r⌋)`.
pub fn se_hidden(c: usize, r: usize) -> usize {
    (c / r.max(1)).max(1)
}

pub fn ese_param_count(c: usize) -> usize {
    c * c + c
}

pub fn se_param_count(c: usize, r: usize) -> usize {
    let h = se_hidden(c, r);
    2 * c * h + h + c
}

#[derive(Clone, Debug)]
enum Gate {
    None,
    Se(Linear, Linear),
    Ese(Linear),
}

#[derive(Clone, Debug)]
pub struct OsaModule {
    convs: Vec<Conv>,
    aggregate: Conv,
    gate: Gate,
    residual: bool,
    in_channels: usize,
}

impl OsaModule {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        name: &str,
        in_channels: usize,
        cfg: &OsaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(cfg.conv_count);
        let mut c = in_channels;
        for i in 0..cfg.conv_count {
            convs.push(Conv::new(
                store,
                &format!("{name}.conv{i}"),
                c,
                cfg.conv_channels,
                cfg.kernel,
                1,
                Init::He,
                rng,
            )?);
            c = cfg.conv_channels;
        }
        let concat_width = in_channels + cfg.conv_count * cfg.conv_channels;
        let aggregate = Conv::new(
            store,
            &format!("{name}.concat"),
            concat_width,
            cfg.out_channels,
            1,
            1,
            Init::He,
            rng,
        )?;
        let out = cfg.out_channels;
        let gate = match cfg.attention {
            Attention::None => Gate::None,
            Attention::Ese => Gate::Ese(Linear::new(
                store,
                &format!("{name}.ese.fc"),
                out,
                out,
                Init::Normal(0.01),
                rng,
            )?),
            Attention::Se => {
                let h = se_hidden(out, cfg.se_reduction);
                Gate::Se(
                    Linear::new(store, &format!("{name}.se.fc1"), out, h, Init::He, rng)?,
                    Linear::new(store, &format!("{name}.se.fc2"), h, out, Init::Normal(0.01), rng)?,
                )
            }
        };
        Ok(OsaModule {
            convs,
            aggregate,
            gate,
            // The identity path needs matching widths; otherwise it is dropped.
            residual: cfg.residual && in_channels == out,
            in_channels,
        })
    }

    pub fn has_residual(&self) -> bool {
        self.residual
    }

    /// Channels entering the 1×1 aggregation convolution.
    pub fn concat_width(&self, conv_channels: usize) -> usize {
        self.in_channels + self.convs.len() * conv_channels
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.value(x).dims4()?[1];
        if c != self.in_channels {
            return Err(shape_err(
                "osa_forward",
                format!("module expects {} channels, got {c}", self.in_channels),
            ));
        }
        let mut branches = Vec::with_capacity(self.convs.len() + 1);
        branches.push(x);
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward_relu(tape, p, h)?;
            branches.push(h);
        }
        let cat = tape.concat_channels(&branches)?;
        let div = self.aggregate.forward_relu(tape, p, cat)?;
        let refined = match &self.gate {
            Gate::None => div,
            Gate::Ese(fc) => ese_forward(tape, div, p[fc.w], p[fc.b])?,
            Gate::Se(fc1, fc2) => se_forward(tape, div, (p[fc1.w], p[fc1.b]), (p[fc2.w], p[fc2.b]))?,
        };
        if self.residual {
            if tape.shape(refined) != tape.shape(x) {
                return Err(shape_err("osa_forward", "residual extents differ"));
            }
            tape.add(refined, x)
        } else {
            Ok(refined)
        }
    }
}
