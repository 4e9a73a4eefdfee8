//! Attention-weighted adaptive instance normalisation between point and style features.

use super::init::he_uniform;
use super::layers::{instance_norm, linear, Binder};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct StylizerDims {
    pub content: usize,
    pub style: usize,
    pub hidden: usize,
    pub attention: usize,
}

pub fn init_stylizer(store: &mut ParamStore, d: StylizerDims, seed: u64) {
    let mut put = |name: &str, rows: usize, cols: usize, bias: bool| {
        let w = format!("stylizer.{name}.weight");
        store.insert(&w, he_uniform(seed, &w, &[rows, cols], rows));
        if bias {
            store.insert(format!("stylizer.{name}.bias"), Tensor::zeros(&[cols]));
        }
    };
    put("phi.fc0", d.content, d.hidden, true);
    put("phi.fc1", d.hidden, d.hidden, true);
    put("psi.fc0", d.hidden, d.hidden, true);
    put("psi.fc1", d.hidden, d.content, true);
    put("attn.q", d.hidden, d.attention, false);
    put("attn.k", d.style, d.attention, false);
    put("attn.v", d.style, d.hidden, false);
}

pub struct Attended {
    pub attention: Var,
    pub mean: Var,
    pub std: Var,
}

/// Row-softmax attention over `values`, returning the attention matrix and the
/// attention-weighted mean and standard deviation of `values`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, values: Var) -> Result<Attended> {
    let d = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let logits = tape.scale(raw, 1.0 / (d as f32).sqrt());
    let lv = tape.value(logits);
    if !lv.is_finite() {
        let max_logit = lv.data().iter().fold(0f32, |m, v| if v.is_nan() { m } else { m.max(v.abs()) });
        return Err(Error::AttentionOverflow { max_logit });
    }
    let attention = tape.softmax(logits, 1)?;
    let mean = tape.matmul(attention, values)?;
    // Rows of A sum to one, so shifting values by a per-channel constant leaves the
    // variance unchanged; centring first keeps f32 cancellation small.
    let centre = tape.mean_axis(values, 0)?;
    let centred = tape.sub(values, centre)?;
    let shifted_mean = tape.matmul(attention, centred)?;
    let sq = tape.mul(centred, centred)?;
    let second = tape.matmul(attention, sq)?;
    let mean_sq = tape.mul(shifted_mean, shifted_mean)?;
    let var = tape.sub(second, mean_sq)?;
    let var = tape.clamp_min(var, 0.0);
    let std = tape.sqrt(var);
    Ok(Attended { attention, mean, std })
}

pub struct Stylized {
    pub features: Var,
    pub attention: Var,
    /// `S ⊙ q + M`, the input to ψ.
    pub modulated: Var,
}

/// `ψ(S ⊙ norm(φ(F_c)) + M)` with `M`, `S` from attention of `φ(F_c)` over `F_s`.
pub fn stylize(tape: &mut Tape, p: &Binder, content: Var, style: Var) -> Result<Stylized> {
    let h = linear(tape, p, "stylizer.phi.fc0", content, true)?;
    let h = tape.relu(h);
    let c = linear(tape, p, "stylizer.phi.fc1", h, true)?;
    let q = instance_norm(tape, c)?;
    let k = instance_norm(tape, style)?;
    let qw = linear(tape, p, "stylizer.attn.q", q, false)?;
    let kw = linear(tape, p, "stylizer.attn.k", k, false)?;
    let vw = linear(tape, p, "stylizer.attn.v", style, false)?;
    let a = attend(tape, qw, kw, vw)?;
    let scaled = tape.mul(a.std, q)?;
    let modulated = tape.add(scaled, a.mean)?;
    let h = linear(tape, p, "stylizer.psi.fc0", modulated, true)?;
    let h = tape.relu(h);
    let features = linear(tape, p, "stylizer.psi.fc1", h, true)?;
    Ok(Stylized {
        features,
        attention: a.attention,
        modulated,
    })
}

/// Parameter-free variant on equal-width rows: `S ⊙ norm(content) + M` with
/// attention from normalised content to normalised style.
pub fn adaattn(tape: &mut Tape, content: Var, style: Var) -> Result<Var> {
    let q = instance_norm(tape, content)?;
    let k = instance_norm(tape, style)?;
    let a = attend(tape, q, k, style)?;
    let scaled = tape.mul(a.std, q)?;
    tape.add(scaled, a.mean)
}
