//! Densely connected per-point feature block.
//!
//! Five per-point affine layers (batch norm + ReLU after each); layer `l`
//! consumes the block input concatenated with every previous layer output.
//! The local features of all five layers are concatenated, then pooled
//! globally over the shape's points by both max and average; output per
//! point is `[local | max-pool | avg-pool]`. With the default five 64-wide
//! layers that is 320 + 320 + 320 = 960 features.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{BatchNorm, Binder, Linear, Mode, Tape, TensorRef};

/// Five-layer densely connected block with dual global pooling.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<(Linear, BatchNorm)>,
    c_in: usize,
}

pub const DEFAULT_LAYER_WIDTHS: [usize; 5] = [64, 64, 64, 64, 64];

impl DenseBlock {
    pub fn new(name: &str, rng: &mut StreamRng, c_in: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut in_width = c_in;
        for (l, &w) in widths.iter().enumerate() {
            layers.push((
                Linear::new(&format!("{name}.l{l}"), rng, in_width, w),
                BatchNorm::new(&format!("{name}.l{l}.bn"), w),
            ));
            in_width += w;
        }
        Self { layers, c_in }
    }

    pub fn input_width(&self) -> usize {
        self.c_in
    }

    /// Concatenated local width (sum of layer widths).
    pub fn local_width(&self) -> usize {
        self.layers.iter().map(|(l, _)| l.fan_out()).sum()
    }

    /// Per-point output width: local + max-pool + avg-pool.
    pub fn output_width(&self) -> usize {
        3 * self.local_width()
    }

    /// One shape forward: `features` is N×C_in, pooling runs over its rows.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        features: TensorRef,
        mode: Mode,
    ) -> Result<TensorRef> {
        let (n, c) = (tape.value(features).rows(), tape.value(features).cols());
        if c != self.c_in {
            return Err(Error::ShapeMismatch {
                op: "dense_block",
                left: vec![n, c],
                right: vec![self.c_in],
            });
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::DegenerateBatch { rows: n });
        }
        let mut outs: Vec<TensorRef> = Vec::with_capacity(self.layers.len());
        for (lin, bn) in &mut self.layers {
            let mut parts = vec![features];
            parts.extend_from_slice(&outs);
            let input = tape.concat_cols(&parts)?;
            let pre = lin.forward(tape, binder, input)?;
            let normed = bn.forward(tape, binder, pre, mode)?;
            outs.push(tape.relu(normed));
        }
        let local = tape.concat_cols(&outs)?;
        let gmax = tape.col_max(local)?;
        let gavg = tape.col_mean(local)?;
        let gmax_b = tape.broadcast_rows(gmax, n)?;
        let gavg_b = tape.broadcast_rows(gavg, n)?;
        tape.concat_cols(&[local, gmax_b, gavg_b])
    }

    pub fn visit(&self, f: &mut dyn FnMut(&crate::tensor::Param)) {
        for (lin, bn) in &self.layers {
            lin.visit(f);
            bn.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut crate::tensor::Param)) {
        for (lin, bn) in &mut self.layers {
            lin.visit_mut(f);
            bn.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn default_output_width_is_960() {
        let mut rng = StreamRng::new(0, "blk");
        let block = DenseBlock::new("b", &mut rng, 3, &DEFAULT_LAYER_WIDTHS);
        assert_eq!(block.local_width(), 320);
        assert_eq!(block.output_width(), 960);
    }

    #[test]
    fn forward_shape_and_width() {
        let mut rng = StreamRng::new(1, "blk");
        let mut block = DenseBlock::new("b", &mut rng, 3, &DEFAULT_LAYER_WIDTHS);
        let mut tape = Tape::new();
        let mut binder = Binder::eval();
        let x = tape.constant(Tensor::full(vec![4, 3], 0.25));
        let y = block
            .forward(&mut tape, &mut binder, x, Mode::Eval)
            .unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 960]);
    }

    #[test]
    fn arbitrary_widths_follow_formula() {
        let mut rng = StreamRng::new(2, "blk");
        let widths = [8, 16, 4, 12, 20];
        let mut block = DenseBlock::new("b", &mut rng, 5, &widths);
        assert_eq!(block.output_width(), 3 * 60);
        let mut tape = Tape::new();
        let mut binder = Binder::train();
        let x = tape.constant(Tensor::full(vec![3, 5], 1.0));
        let y = block
            .forward(&mut tape, &mut binder, x, Mode::Train)
            .unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 180]);
    }

    #[test]
    fn identical_rows_make_pools_agree() {
        let mut rng = StreamRng::new(3, "blk");
        let mut block = DenseBlock::new("b", &mut rng, 3, &[8, 8, 8, 8, 8]);
        let mut tape = Tape::new();
        let mut binder = Binder::eval();
        let x = tape.constant(Tensor::full(vec![5, 3], 0.7));
        let y = block
            .forward(&mut tape, &mut binder, x, Mode::Eval)
            .unwrap();
        let out = tape.value(y);
        let local_w = block.local_width();
        for i in 0..5 {
            // all rows identical
            assert_eq!(out.row(i), out.row(0));
            // max-pool equals avg-pool
            for j in 0..local_w {
                let maxv = out.get2(i, local_w + j);
                let avgv = out.get2(i, 2 * local_w + j);
                assert!((maxv - avgv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_mode_rejects_single_point() {
        let mut rng = StreamRng::new(4, "blk");
        let mut block = DenseBlock::new("b", &mut rng, 3, &[4, 4, 4, 4, 4]);
        let mut tape = Tape::new();
        let mut binder = Binder::train();
        let x = tape.constant(Tensor::full(vec![1, 3], 0.0));
        let err = block
            .forward(&mut tape, &mut binder, x, Mode::Train)
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch { rows: 1 }));
    }
}
