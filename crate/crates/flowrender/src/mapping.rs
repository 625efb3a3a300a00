//! Mapping network: a window of motion parameters -> the latent motion
//! vector `T` consumed by every AdaIN site.
//!
//! The stack is `L` repetitions of [1D conv, kernel 3, valid, leaky 0.2,
//! centre crop of one column per side], so each layer shortens the temporal
//! axis by 4. What remains is average-pooled over time and passed through a
//! final affine layer. With `L = 0` the network degenerates to an affine
//! embedding of the (pooled) single column.

use crate::config::ModelConfig;
use crate::datamodel::{ParamWindow, PARAM_LEN};
use crate::error::{FlowError, Result};
use crate::nn::{BoundParams, ParamSpec, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Latent target-motion code.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionVector {
    values: Tensor,
}

impl MotionVector {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 1 {
            return Err(FlowError::shape("motion vector", "[D]", format!("{:?}", values.shape())));
        }
        values.validate_finite("motion vector")?;
        Ok(MotionVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.numel()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }
}

#[derive(Clone, Debug)]
pub struct MappingNet {
    pub motion_dim: usize,
    pub layers: usize,
}

impl MappingNet {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        MappingNet { motion_dim: cfg.motion_dim, layers: cfg.mapping_layers }
    }

    /// Columns consumed by the conv/crop stack before pooling.
    pub fn receptive_len(&self) -> usize {
        4 * self.layers + 1
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.motion_dim;
        let mut specs = Vec::new();
        for i in 0..self.layers {
            let in_ch = if i == 0 { PARAM_LEN } else { d };
            specs.extend(crate::nn::conv_specs(&format!("mapping/conv{i}"), &[d, in_ch, 3]));
        }
        let pooled = if self.layers == 0 { PARAM_LEN } else { d };
        specs.extend(crate::nn::conv_specs("mapping/out", &[d, pooled]));
        specs
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, window: Var) -> Result<Var> {
        let shape = tape.shape_of(window);
        if shape.len() != 2 || shape[0] != PARAM_LEN {
            return Err(FlowError::shape("mapping input", format!("[{PARAM_LEN}, L]"), format!("{shape:?}")));
        }
        if shape[1] < self.receptive_len() {
            return Err(FlowError::config(format!(
                "window of {} columns is too short for {} mapping layers (needs {})",
                shape[1],
                self.layers,
                self.receptive_len()
            )));
        }
        let mut x = window;
        for i in 0..self.layers {
            let w = p.var(&format!("mapping/conv{i}/w"));
            let b = p.var(&format!("mapping/conv{i}/b"));
            x = tape.conv1d_valid(x, w, b);
            x = tape.leaky_relu(x, LEAKY_SLOPE);
            x = tape.crop1d(x, 1, 1);
        }
        let pooled = tape.channel_mean(x);
        Ok(tape.linear(pooled, p.var("mapping/out/w"), p.var("mapping/out/b")))
    }

    /// Value-level entry point: run the network on its own throwaway tape.
    pub fn map_motion(&self, store: &ParamStore, window: &ParamWindow) -> Result<MotionVector> {
        let mut tape = Tape::new();
        let p = BoundParams::bind_all_constant(&mut tape, store);
        let w = tape.constant(window.tensor().clone());
        let out = self.forward(&mut tape, &p, w)?;
        MotionVector::new(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::window_from_params;
    use crate::datamodel::MotionParams;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_window(rng: &mut ChaCha8Rng, cols: usize) -> Tensor {
        Tensor::from_vec(
            &[PARAM_LEN, cols],
            (0..PARAM_LEN * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn zero_layers_is_affine_embedding_of_column() {
        let net = MappingNet { motion_dim: 8, layers: 0 };
        let mut store = ParamStore::init(&net.param_specs(), 3).unwrap();
        store.randomize(9, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let col: Vec<f64> = (0..PARAM_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
        let window =
            ParamWindow::from_tensor(Tensor::from_vec(&[PARAM_LEN, 1], col.clone())).unwrap();
        let t = net.map_motion(&store, &window).unwrap();
        // oracle: direct affine map of the column
        let w = store.get("mapping/out/w").unwrap();
        let b = store.get("mapping/out/b").unwrap();
        for m in 0..8 {
            let mut want = b.data()[m];
            for (n, cv) in col.iter().enumerate() {
                want += w.data()[m * PARAM_LEN + n] * cv;
            }
            assert!((t.tensor().data()[m] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_length_bookkeeping_27_to_15() {
        // Feed 27 columns through 3 layers; each removes 4. Probe the stack
        // by pooling: build the net and check it accepts exactly >= 13.
        let net = MappingNet { motion_dim: 16, layers: 3 };
        assert_eq!(net.receptive_len(), 13);
        let store = ParamStore::init(&net.param_specs(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let p = BoundParams::bind_all_constant(&mut tape, &store);
        let win = tape.constant(random_window(&mut rng, 27));
        // trace the intermediate length layer by layer
        let mut x = win;
        let mut expect_len = 27;
        for i in 0..3 {
            let w = p.var(&format!("mapping/conv{i}/w"));
            let b = p.var(&format!("mapping/conv{i}/b"));
            x = tape.conv1d_valid(x, w, b);
            expect_len -= 2;
            assert_eq!(tape.shape_of(x)[1], expect_len);
            x = tape.leaky_relu(x, LEAKY_SLOPE);
            x = tape.crop1d(x, 1, 1);
            expect_len -= 2;
            assert_eq!(tape.shape_of(x)[1], expect_len);
        }
        assert_eq!(expect_len, 15);
        // and the full forward emits a 16-vector
        let out = net.forward(&mut tape, &p, win).unwrap();
        assert_eq!(tape.shape_of(out), vec![16]);
    }

    #[test]
    fn window_shorter_than_receptive_field_is_config_error() {
        let net = MappingNet { motion_dim: 8, layers: 3 };
        let store = ParamStore::init(&net.param_specs(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let window = ParamWindow::from_tensor(random_window(&mut rng, 11)).unwrap();
        let err = net.map_motion(&store, &window).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    /// Time-invariance oracle: over a constant-in-time window, each valid
    /// conv collapses to a pointwise affine map whose weight is the kernel
    /// summed over taps. A hand-rolled collapsed network must agree.
    #[test]
    fn constant_window_matches_collapsed_pointwise_network() {
        let net = MappingNet { motion_dim: 12, layers: 3 };
        let mut store = ParamStore::init(&net.param_specs(), 11).unwrap();
        store.randomize(13, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let col: Vec<f64> = (0..PARAM_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cols = 2 * 13 + 1; // any width >= receptive field
        let mut data = vec![0.0; PARAM_LEN * cols];
        for r in 0..PARAM_LEN {
            for c in 0..cols {
                data[r * cols + c] = col[r];
            }
        }
        let window =
            ParamWindow::from_tensor(Tensor::from_vec(&[PARAM_LEN, cols], data)).unwrap();
        let got = net.map_motion(&store, &window).unwrap();

        // collapsed oracle on the single column
        let lrelu = |v: f64| if v > 0.0 { v } else { LEAKY_SLOPE * v };
        let mut x = col;
        for i in 0..3 {
            let w = store.get(&format!("mapping/conv{i}/w")).unwrap();
            let b = store.get(&format!("mapping/conv{i}/b")).unwrap();
            let (o, ci) = (w.shape()[0], w.shape()[1]);
            let mut y = vec![0.0; o];
            for oi in 0..o {
                let mut acc = b.data()[oi];
                for cii in 0..ci {
                    let taps: f64 = (0..3).map(|k| w.data()[(oi * ci + cii) * 3 + k]).sum();
                    acc += taps * x[cii];
                }
                y[oi] = lrelu(acc);
            }
            x = y;
        }
        let w = store.get("mapping/out/w").unwrap();
        let b = store.get("mapping/out/b").unwrap();
        for m in 0..12 {
            let mut want = b.data()[m];
            for (n, v) in x.iter().enumerate() {
                want += w.data()[m * x.len() + n] * v;
            }
            assert!(
                (got.tensor().data()[m] - want).abs() < 1e-5,
                "collapsed oracle disagrees at {m}: {} vs {want}",
                got.tensor().data()[m]
            );
        }
    }

    #[test]
    fn clamped_padding_of_constant_window_is_invariant() {
        let net = MappingNet { motion_dim: 6, layers: 1 };
        let mut store = ParamStore::init(&net.param_specs(), 5).unwrap();
        store.randomize(6, 0.4);
        let p = MotionParams::zeros();
        let mut p2 = MotionParams::zeros();
        p2.beta[0] = 0.7;
        // constant sequence: windows of different radii (>= receptive) agree
        let params = vec![p2.clone(); 9];
        let w_small = window_from_params(&params, 4, 2).unwrap();
        let w_large = window_from_params(&params, 4, 4).unwrap();
        let t_small = net.map_motion(&store, &w_small).unwrap();
        let t_large = net.map_motion(&store, &w_large).unwrap();
        for i in 0..6 {
            assert!((t_small.tensor().data()[i] - t_large.tensor().data()[i]).abs() < 1e-9);
        }
        drop(p);
    }

    #[test]
    fn gradient_wrt_window_matches_finite_differences() {
        let net = MappingNet { motion_dim: 4, layers: 1 };
        let mut store = ParamStore::init(&net.param_specs(), 21).unwrap();
        store.randomize(22, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w0 = random_window(&mut rng, 7);

        let eval = |w: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let p = BoundParams::bind_all_constant(&mut tape, &store);
            let win = tape.constant(w.clone());
            let out = net.forward(&mut tape, &p, win).unwrap();
            let s = tape.sum(out);
            tape.scalar_value(s)
        };
        let mut tape = Tape::new();
        let p = BoundParams::bind_all_constant(&mut tape, &store);
        let win = tape.param(w0.clone());
        let out = net.forward(&mut tape, &p, win).unwrap();
        let root = tape.sum(out);
        let grads = tape.backward(root);
        let analytic = grads.get(win).unwrap().clone();

        for probe in 0..12 {
            let i = (probe * 37) % w0.numel();
            let mut plus = w0.clone();
            plus.data_mut()[i] += 1e-4;
            let mut minus = w0.clone();
            minus.data_mut()[i] -= 1e-4;
            let fd = (eval(&plus) - eval(&minus)) / 2e-4;
            let an = analytic.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(((fd - an) / denom).abs() < 1e-3, "fd {fd} vs {an} at {i}");
        }
    }
}
