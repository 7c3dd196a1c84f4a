//! Built-in numeric self-checks behind `psf selfcheck`.
//!
//! A fast subset of the oracle and gradient suites: each check recomputes
//! its expectation through an independent route (naive loops, finite
//! differences, closed forms) and fails the whole command when any
//! disagreement exceeds tolerance.

use crate::blocks::DenseBlock;
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::harness::metrics::{shape_miou, EmptyUnion};
use crate::hgrid::{HierGrid, LabelThresholds};
use crate::losses::{adv_seg_losses, alpha_gan_losses, AdvLossInputs, AlphaGanBatch};
use crate::pdnet::{pd_node_forward, PdLevel};
use crate::pointconv::{fps_downsample, knn_neighborhood};
use crate::rng::StreamRng;
use crate::sparse::{
    offsets_size3, sparse_conv_valid, voxelize, KernelKind, SparseConvParams, SparseGrid,
};
use crate::tensor::{adam_step, AdamConfig, Binder, Linear, Mode, Param, Tape, Tensor};
use crate::trees::build_kd_largest_span;

/// Run every check; returns one line per passing check.
pub fn run_selfcheck() -> Result<Vec<String>> {
    let checks: &[(&str, fn() -> Result<()>)] = &[
        ("tensor gradients (linear/relu/batch-norm/cross-entropy)", check_tensor_gradients),
        ("adam bias-corrected first step", check_adam_first_step),
        ("tree-node recurrence vs brute-force triple sum", check_pd_node_oracle),
        ("valid sparse convolution vs dense oracle", check_sparse_oracle),
        ("loss formulas worked values", check_loss_values),
        ("hierarchy composition vs per-voxel walk", check_hgrid_compose),
        ("k-d tree permutation invariance", check_kd_invariance),
        ("mIoU hand-counted value", check_miou_value),
        ("neighborhood and sampling determinism", check_point_ops),
        ("dense block output width", check_dense_block),
    ];
    let mut lines = Vec::with_capacity(checks.len());
    for (name, f) in checks {
        f().map_err(|e| Error::NumericCheck(format!("{name}: {e}")))?;
        lines.push(format!("ok {name}"));
    }
    Ok(lines)
}

fn ensure(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::NumericCheck(msg.to_string()))
    }
}

fn check_tensor_gradients() -> Result<()> {
    for seed in 0..5u64 {
        let mut rng = StreamRng::new(seed, "selfcheck/grad");
        let lin = Linear::new("l", &mut rng, 3, 2);
        let x_data: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let labels = vec![0usize, 1, 0, 1];

        let run = |w: &[f64], lin: &Linear, x_data: &[f64]| -> f64 {
            let mut lin = lin.clone();
            lin.w.value.data_mut().copy_from_slice(w);
            let mut tape = Tape::new();
            let mut binder = Binder::eval();
            let x = tape.leaf(Tensor::new(vec![4, 3], x_data.to_vec()).unwrap(), false);
            let h = lin.forward(&mut tape, &mut binder, x).unwrap();
            let r = tape.relu(h);
            let (loss, _) = tape.softmax_cross_entropy(r, &labels).unwrap();
            tape.value(loss).data()[0]
        };

        // analytic
        let mut tape = Tape::new();
        let mut binder = Binder::train();
        let x = tape.leaf(Tensor::new(vec![4, 3], x_data.clone())?, false);
        let h = lin.forward(&mut tape, &mut binder, x)?;
        let r = tape.relu(h);
        let (loss, _) = tape.softmax_cross_entropy(r, &labels)?;
        tape.backward(loss)?;
        let analytic = binder
            .grad_of(&tape, &lin.w)
            .map(|g| g.to_vec())
            .unwrap_or_default();
        let base = lin.w.value.data().to_vec();
        let numeric = gradcheck::central_diff(|w| run(w, &lin, &x_data), &base, 1e-5);
        let err = gradcheck::max_rel_err(&analytic, &numeric);
        ensure(err <= 1e-4, &format!("weight gradient rel err {err}"))?;
    }

    // batch norm, composite gradient through batch statistics
    let mut rng = StreamRng::new(99, "selfcheck/bn");
    let x0: Vec<f64> = (0..8).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let bn_loss = |x: &[f64]| -> f64 {
        let mut bn = crate::tensor::BatchNorm::new("bn", 2);
        bn.gamma.value = Tensor::new(vec![2], vec![1.3, 0.7]).unwrap();
        bn.beta.value = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::eval();
        let xt = tape.leaf(Tensor::new(vec![4, 2], x.to_vec()).unwrap(), false);
        let y = bn.forward(&mut tape, &mut binder, xt, Mode::Train).unwrap();
        let sq = tape.square(y);
        let loss = tape.mean_all(sq).unwrap();
        tape.value(loss).data()[0]
    };
    let mut bn = crate::tensor::BatchNorm::new("bn", 2);
    bn.gamma.value = Tensor::new(vec![2], vec![1.3, 0.7])?;
    bn.beta.value = Tensor::new(vec![2], vec![0.1, -0.2])?;
    let mut tape = Tape::new();
    let mut binder = Binder::train();
    let xt = tape.leaf(Tensor::new(vec![4, 2], x0.clone())?, true);
    let y = bn.forward(&mut tape, &mut binder, xt, Mode::Train)?;
    let sq = tape.square(y);
    let loss = tape.mean_all(sq)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xt).unwrap().to_vec();
    let numeric = gradcheck::central_diff(bn_loss, &x0, 1e-5);
    let err = gradcheck::max_rel_err(&analytic, &numeric);
    ensure(err <= 1e-4, &format!("batch-norm input gradient rel err {err}"))
}

fn check_adam_first_step() -> Result<()> {
    let mut p = Param::new("p", Tensor::scalar(0.0));
    p.accumulate_grad(&[1.0]);
    adam_step([&mut p], &AdamConfig::with_lr(0.1))?;
    ensure(
        (p.value.data()[0] + 0.1).abs() < 1e-8,
        &format!("first step moved to {}", p.value.data()[0]),
    )
}

fn check_pd_node_oracle() -> Result<()> {
    let mut rng = StreamRng::new(5, "selfcheck/node");
    for _ in 0..10 {
        let level = PdLevel::new("l", &mut rng, 3, 3);
        let v1 = Tensor::new(vec![3], (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect())?;
        let v2 = Tensor::new(vec![3], (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect())?;
        let mut n = [
            rng.uniform(-1.0, 1.0),
            rng.uniform(-1.0, 1.0),
            rng.uniform(-1.0, 1.0),
        ];
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if norm < 1e-3 {
            continue;
        }
        for v in &mut n {
            *v /= norm;
        }
        let n1 = [-n[0], -n[1], -n[2]];
        let mut tape = Tape::new();
        let mut binder = Binder::eval();
        let out = pd_node_forward(&mut tape, &mut binder, &v1, &v2, &n1, &n, &level)?;
        let mut expect = vec![0.0; 3];
        for (v, nk) in [(&v1, &n1), (&v2, &n)] {
            for s in 1..=2i32 {
                let sign = (-1.0f64).powi(s);
                for d in 0..3 {
                    let alpha = (sign * nk[d]).max(0.0);
                    if alpha == 0.0 {
                        continue;
                    }
                    let lin = &level.ops[(s - 1) as usize][d];
                    for j in 0..3 {
                        let mut acc = lin.b.value.data()[j];
                        for i in 0..3 {
                            acc += v.data()[i].max(0.0) * lin.w.value.get2(i, j);
                        }
                        expect[j] += alpha * acc;
                    }
                }
            }
        }
        for j in 0..3 {
            let diff = (tape.value(out).get2(0, j) - expect[j]).abs();
            ensure(diff < 1e-12, &format!("node output differs by {diff}"))?;
        }
    }
    Ok(())
}

fn check_sparse_oracle() -> Result<()> {
    let mut rng = StreamRng::new(6, "selfcheck/sparse");
    for _ in 0..3 {
        let r = 5usize;
        let mut entries = Vec::new();
        for x in 0..r as u32 {
            for y in 0..r as u32 {
                for z in 0..r as u32 {
                    if rng.uniform(0.0, 1.0) < 0.25 {
                        entries.push(([x, y, z], vec![rng.uniform(-1.0, 1.0)]));
                    }
                }
            }
        }
        if entries.is_empty() {
            entries.push(([0, 0, 0], vec![1.0]));
        }
        let grid = SparseGrid::from_entries(r, 1, entries)?;
        let mut params = SparseConvParams::new("c", &mut rng, KernelKind::Size3, 1, 1);
        params.bias.value = Tensor::new(vec![1], vec![rng.uniform(-0.5, 0.5)])?;

        let mut tape = Tape::new();
        let mut binder = Binder::eval();
        let feats = tape.constant(grid.features_tensor());
        let out = sparse_conv_valid(&mut tape, &mut binder, &grid.sites, feats, &params)?;

        // dense route: zero-filled volume, naive loops
        let mut dense = vec![0.0; r * r * r];
        for (row, s) in grid.sites.sites().iter().enumerate() {
            dense[(s[0] as usize * r + s[1] as usize) * r + s[2] as usize] = grid.values[row];
        }
        for (row, s) in grid.sites.sites().iter().enumerate() {
            let mut expect = params.bias.value.data()[0];
            for (o, off) in offsets_size3().into_iter().enumerate() {
                let x = s[0] as i64 + off[0];
                let y = s[1] as i64 + off[1];
                let z = s[2] as i64 + off[2];
                if x < 0 || y < 0 || z < 0 || x >= r as i64 || y >= r as i64 || z >= r as i64 {
                    continue;
                }
                expect += params.weights[o].value.data()[0]
                    * dense[(x as usize * r + y as usize) * r + z as usize];
            }
            let diff = (tape.value(out).get2(row, 0) - expect).abs();
            ensure(diff <= 1e-9, &format!("sparse vs dense differs by {diff}"))?;
        }
    }
    Ok(())
}

fn check_loss_values() -> Result<()> {
    let ln2 = std::f64::consts::LN_2;
    let gt = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let (_, l_d) = adv_seg_losses(&AdvLossInputs {
        seg: &gt,
        gt_onehot: &gt,
        d_real: 0.5,
        d_fake: 0.5,
        lambda: 1.0,
    })?;
    ensure((l_d - 2.0 * ln2).abs() < 1e-9, &format!("L_D = {l_d}"))?;

    let grid = Tensor::full(vec![2, 2], 0.5);
    let (_, l_d, l_dl) = alpha_gan_losses(&AlphaGanBatch {
        x_real: &grid,
        x_recon: &grid,
        x_gen: &grid,
        d_real: 0.5,
        d_recon: 0.5,
        d_gen: 0.5,
        dl_enc: 0.5,
        dl_gen: 0.5,
    })?;
    ensure((l_d - 3.0 * ln2).abs() < 1e-9, &format!("L_D = {l_d}"))?;
    ensure((l_dl - 2.0 * ln2).abs() < 1e-9, &format!("L_DL = {l_dl}"))
}

fn check_hgrid_compose() -> Result<()> {
    let mut rng = StreamRng::new(7, "selfcheck/hgrid");
    let probs: Vec<f64> = (0..4096).map(|_| rng.uniform(0.0, 1.0)).collect();
    let mut hg = HierGrid::from_level0(&probs, LabelThresholds::default())?;
    // refine a handful of boundary cells, two levels deep where possible
    for _ in 0..20 {
        let site = [
            rng.index(16) as u16,
            rng.index(16) as u16,
            rng.index(16) as u16,
        ];
        let _ = hg.refine(0, site);
    }
    let composed = hg.compose_full();
    for _ in 0..4096 {
        let v = [rng.index(256), rng.index(256), rng.index(256)];
        ensure(
            composed.get(v[0], v[1], v[2]) == hg.occupancy_at(v),
            &format!("composition differs at {v:?}"),
        )?;
    }
    Ok(())
}

fn check_kd_invariance() -> Result<()> {
    let mut rng = StreamRng::new(8, "selfcheck/kd");
    for _ in 0..5 {
        let n = 10 + rng.index(50);
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                ]
            })
            .collect();
        let pc = PointCloud::new(points.clone(), None, "t")?;
        let reference: Vec<[f64; 3]> = {
            let t = build_kd_largest_span(&pc)?;
            t.leaves.iter().map(|&i| t.padded.points[i]).collect()
        };
        for _ in 0..3 {
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let shuffled = PointCloud::new(perm.iter().map(|&i| points[i]).collect(), None, "t")?;
            let t = build_kd_largest_span(&shuffled)?;
            let got: Vec<[f64; 3]> = t.leaves.iter().map(|&i| t.padded.points[i]).collect();
            ensure(got == reference, "leaf values changed under permutation")?;
        }
    }
    Ok(())
}

fn check_miou_value() -> Result<()> {
    let got = shape_miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, EmptyUnion::One)?;
    ensure(
        (got - 7.0 / 12.0).abs() < 1e-12,
        &format!("mIoU = {got}, expected 7/12"),
    )
}

fn check_point_ops() -> Result<()> {
    let points = vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [2.0, 0.0, 0.0],
        [3.0, 0.0, 0.0],
    ];
    let idx = fps_downsample(&points, 2)?;
    ensure(idx == vec![0, 3], "farthest-point sampling missed the endpoints")?;
    let batch = knn_neighborhood(&points, &[[0.9, 0.0, 0.0]], 2)?;
    ensure(batch.indices == vec![1, 0], "nearest neighbors out of order")?;
    // voxelization formula spot check
    let pc = PointCloud::new(vec![[0.0, 0.0, 0.0]], None, "t")?;
    let vox = voxelize(&pc, 50, false)?;
    ensure(
        vox.grid.sites.sites() == [[25, 25, 25]],
        "voxel index formula drifted",
    )
}

fn check_dense_block() -> Result<()> {
    let mut rng = StreamRng::new(9, "selfcheck/block");
    let mut block = DenseBlock::new("b", &mut rng, 3, &[64, 64, 64, 64, 64]);
    ensure(block.output_width() == 960, "default block width is not 960")?;
    let mut tape = Tape::new();
    let mut binder = Binder::eval();
    let x = tape.constant(Tensor::full(vec![3, 3], 0.5));
    let y = block.forward(&mut tape, &mut binder, x, Mode::Eval)?;
    ensure(
        tape.value(y).shape() == [3, 960],
        "block forward shape mismatch",
    )
}
