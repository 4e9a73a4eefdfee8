//! Three-level U-Net mapping rasterised features to RGB.
//!
//! ```text
//! F (C, H, W) ── conv3×3/2, lrelu ──> e1 (C, H/2) ── conv3×3/2, lrelu ──> e2 (C, H/4)
//! d1 = relu(tconv3×3/2(e2) + skip1×1(e1))            (C/2, H/2)
//! d2 = relu(tconv3×3/2(d1) + skip1×1(F))             (C/4, H)
//! out = sigmoid(conv3×3(d2))                          (3, H)
//! ```

use super::init::{he_uniform, uniform};
use super::layers::Binder;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f32 = 0.2;

pub fn init_decoder(store: &mut ParamStore, c: usize, seed: u64) {
    let mut conv = |name: &str, shape: [usize; 4], fan_in: usize| {
        let w = format!("decoder.{name}.weight");
        store.insert(&w, he_uniform(seed, &w, &shape, fan_in));
        let bias_len = if name.starts_with("dec") { shape[1] } else { shape[0] };
        store.insert(format!("decoder.{name}.bias"), Tensor::zeros(&[bias_len]));
    };
    let (h, q) = (c / 2, c / 4);
    conv("enc1", [c, c, 3, 3], c * 9);
    conv("enc2", [c, c, 3, 3], c * 9);
    // Transposed-conv layout is (Cin, Cout, k, k); each output sees about Cin·k²/4 taps.
    conv("dec1", [c, h, 3, 3], c * 9 / 4);
    conv("dec2", [h, q, 3, 3], h * 9 / 4);
    conv("skip1", [h, c, 1, 1], c);
    conv("skip2", [q, c, 1, 1], c);
    let w = "decoder.out.weight".to_string();
    store.insert(&w, uniform(seed, &w, &[3, q, 3, 3], (1.0 / (q * 9) as f32).sqrt()));
    store.insert("decoder.out.bias", Tensor::zeros(&[3]));
}

fn conv(tape: &mut Tape, p: &Binder, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.var(tape, &format!("decoder.{name}.weight"))?;
    let b = p.var(tape, &format!("decoder.{name}.bias"))?;
    tape.conv2d(x, w, Some(b), stride, pad)
}

fn up(tape: &mut Tape, p: &Binder, name: &str, x: Var) -> Result<Var> {
    let w = p.var(tape, &format!("decoder.{name}.weight"))?;
    let b = p.var(tape, &format!("decoder.{name}.bias"))?;
    tape.conv_transpose2d(x, w, Some(b), 2, 1, 1)
}

/// `[1, C, H, W]` features to a `[1, 3, H, W]` image in (0, 1). H and W must be multiples of 4.
pub fn decode(tape: &mut Tape, p: &Binder, features: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 4 || s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] == 0 || s[3] == 0 {
        return Err(Error::InvalidArgument(format!(
            "decoder input must be [1, C, H, W] with H, W multiples of 4, got {s:?}"
        )));
    }
    let e1 = conv(tape, p, "enc1", features, 2, 1)?;
    let e1 = tape.leaky_relu(e1, LEAKY_SLOPE);
    let e2 = conv(tape, p, "enc2", e1, 2, 1)?;
    let e2 = tape.leaky_relu(e2, LEAKY_SLOPE);
    let u1 = up(tape, p, "dec1", e2)?;
    let s1 = conv(tape, p, "skip1", e1, 1, 0)?;
    let d1 = tape.add(u1, s1)?;
    let d1 = tape.relu(d1);
    let u2 = up(tape, p, "dec2", d1)?;
    let s2 = conv(tape, p, "skip2", features, 1, 0)?;
    let d2 = tape.add(u2, s2)?;
    let d2 = tape.relu(d2);
    let out = conv(tape, p, "out", d2, 1, 1)?;
    Ok(tape.sigmoid(out))
}
