use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const BN_MOMENTUM: f32 = 0.1;
pub const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running-statistics updates are recorded on the tape.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Binds stored parameters onto a tape; frozen prefixes become constants.
#[derive(Clone, Copy)]
pub struct Binder<'a> {
    pub store: &'a ParamStore,
    frozen: &'a [&'a str],
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, frozen: &[] }
    }

    pub fn with_frozen(store: &'a ParamStore, frozen: &'a [&'a str]) -> Self {
        Self { store, frozen }
    }

    pub fn var(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        if self.frozen.iter().any(|p| name.starts_with(p)) {
            Ok(tape.constant(t.clone()))
        } else {
            Ok(tape.param(name, t))
        }
    }
}

/// `x · W + b` for row-major `x` of shape `[N, Cin]`, `W` stored as `[Cin, Cout]`.
pub fn linear(tape: &mut Tape, p: &Binder, prefix: &str, x: Var, bias: bool) -> Result<Var> {
    let w = p.var(tape, &format!("{prefix}.weight"))?;
    let y = tape.matmul(x, w)?;
    if bias {
        let b = p.var(tape, &format!("{prefix}.bias"))?;
        tape.add(y, b)
    } else {
        Ok(y)
    }
}

/// Per-channel normalisation over rows of `[N, C]` with affine `gamma`/`beta`.
pub fn batch_norm(tape: &mut Tape, p: &Binder, prefix: &str, x: Var, mode: Mode) -> Result<Var> {
    let rm_name = format!("{prefix}.running_mean");
    let rv_name = format!("{prefix}.running_var");
    let normed = match mode {
        Mode::Train => {
            let xv = tape.value(x);
            let (n, c) = (xv.shape()[0], xv.shape()[1]);
            let (mean, var) = column_stats(xv);
            let rm = p.store.buffer(&rm_name)?;
            let rv = p.store.buffer(&rv_name)?;
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let m = BN_MOMENTUM as f64;
            let new_rm: Vec<f32> = (0..c)
                .map(|k| ((1.0 - m) * rm.data()[k] as f64 + m * mean[k]) as f32)
                .collect();
            let new_rv: Vec<f32> = (0..c)
                .map(|k| ((1.0 - m) * rv.data()[k] as f64 + m * var[k] * unbias) as f32)
                .collect();
            tape.record_buffer_update(rm_name, Tensor::new(&[c], new_rm)?);
            tape.record_buffer_update(rv_name, Tensor::new(&[c], new_rv)?);
            tape.standardize(x, 0, NORM_EPS)?
        }
        Mode::Eval => {
            let rm = p.store.buffer(&rm_name)?.clone();
            let rv = p.store.buffer(&rv_name)?;
            let inv: Vec<f32> = rv.data().iter().map(|&v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let inv = Tensor::new(rv.shape(), inv)?;
            let rm = tape.constant(rm);
            let inv = tape.constant(inv);
            let centred = tape.sub(x, rm)?;
            tape.mul(centred, inv)?
        }
    };
    let gamma = p.var(tape, &format!("{prefix}.gamma"))?;
    let beta = p.var(tape, &format!("{prefix}.beta"))?;
    let scaled = tape.mul(normed, gamma)?;
    tape.add(scaled, beta)
}

/// Per-channel standardisation over the rows of `[N, C]`; a single row maps to zeros.
pub fn instance_norm(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.standardize(x, 0, NORM_EPS)
}

fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    let mut mean = vec![0f64; c];
    for r in 0..n {
        for k in 0..c {
            mean[k] += d[r * c + k] as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0f64; c];
    for r in 0..n {
        for k in 0..c {
            var[k] += (d[r * c + k] as f64 - mean[k]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}

pub fn init_batch_norm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
    store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
    store.insert_buffer(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0));
}

/// Apply recorded running-statistics updates in recording order.
pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(String, Tensor)>) -> Result<()> {
    for (name, t) in updates {
        store.set_buffer(&name, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_records_momentum_update() {
        let mut store = ParamStore::new();
        init_batch_norm(&mut store, "bn", 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, 4.0, 3.0, 8.0]).unwrap());
        let y = batch_norm(&mut tape, &Binder::new(&store), "bn", x, Mode::Train).unwrap();
        assert_eq!(tape.value(y).data()[0], -tape.value(y).data()[2]);
        let updates = tape.take_buffer_updates();
        apply_buffer_updates(&mut store, updates).unwrap();
        assert_eq!(store.buffer("bn.running_mean").unwrap().data(), &[0.2, 0.6]);
        // Unbiased variances 2 and 8.
        let rv = store.buffer("bn.running_var").unwrap().data();
        assert!((rv[0] - 1.1).abs() < 1e-6 && (rv[1] - 1.7).abs() < 1e-6);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut store = ParamStore::new();
        init_batch_norm(&mut store, "bn", 1);
        store.set_buffer("bn.running_mean", Tensor::new(&[1], vec![2.0]).unwrap()).unwrap();
        store.set_buffer("bn.running_var", Tensor::new(&[1], vec![4.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1], vec![6.0]).unwrap());
        let y = batch_norm(&mut tape, &Binder::new(&store), "bn", x, Mode::Eval).unwrap();
        assert!((tape.value(y).data()[0] - 2.0).abs() < 1e-5);
        assert!(tape.take_buffer_updates().is_empty());
    }

    #[test]
    fn frozen_prefix_binds_constants() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Tensor::zeros(&[1]));
        store.insert("dec.w", Tensor::zeros(&[1]));
        let frozen = ["enc."];
        let b = Binder::with_frozen(&store, &frozen);
        let mut tape = Tape::new();
        let e = b.var(&mut tape, "enc.w").unwrap();
        let d = b.var(&mut tape, "dec.w").unwrap();
        assert!(!tape.requires_grad(e));
        assert!(tape.requires_grad(d));
    }
}
