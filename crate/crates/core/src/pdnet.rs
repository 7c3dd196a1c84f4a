//! Encoder/decoder network over binary point trees.
//!
//! Leaf coordinates are lifted by a shared affine; a bottom-up pass combines
//! each node's two children through six direction-gated affine transforms
//! (one per sign × axis, shared across the level), gated by
//! `α = max(0, ±n_d)` where `n` is the node's split normal oriented toward
//! the child. A bottleneck affine caps the root; the top-down pass inverts
//! the recurrence with its own gated transforms, merging skip connections by
//! concatenation + affine; a shared per-leaf head emits part posteriors.
//! Predictions average over an ensemble of independently randomized trees.

use rayon::prelude::*;

use crate::data::{augment, normalize_unit_ball, AugmentConfig, DatasetSplit, PointCloud};
use crate::error::{Error, Result};
use crate::harness::metrics::{argmax_labels, shape_miou, EmptyUnion};
use crate::rng::StreamRng;
use crate::tensor::{
    adam_step, softmax_rows, AdamConfig, Binder, Linear, Param, Tape, Tensor, TensorRef,
};
use crate::trees::{build_pd_randomized, pad_to_pow2, BinaryPointTree};

/// Width schedule and sizes for one network.
#[derive(Clone, Debug)]
pub struct PdNetConfig {
    /// Leaf count the trees must have; a power of two.
    pub cloud_size: usize,
    /// Encoder widths, bottom-up; length must be log2(cloud_size).
    pub level_widths: Vec<usize>,
    pub bottleneck: usize,
    /// Hidden widths of the per-leaf head (the final linear to parts is
    /// appended automatically).
    pub head_widths: Vec<usize>,
    pub lift_width: usize,
    /// Trees in the prediction ensemble.
    pub ensemble_size: usize,
    /// Points drawn per node for the principal-direction estimate.
    pub subset_size: usize,
    pub part_count: usize,
}

impl PdNetConfig {
    /// Full-size configuration: 4096-point clouds, widths
    /// 128×4 / 256×4 / 512×4, bottleneck 1024, head 256-256, 16 trees.
    pub fn full(part_count: usize) -> Self {
        let mut level_widths = vec![128; 4];
        level_widths.extend(vec![256; 4]);
        level_widths.extend(vec![512; 4]);
        Self {
            cloud_size: 4096,
            level_widths,
            bottleneck: 1024,
            head_widths: vec![256, 256],
            lift_width: 128,
            ensemble_size: 16,
            subset_size: 32,
            part_count,
        }
    }

    /// Desk-scale configuration for a given cloud size: widths start at 16
    /// and double every second level, capped at 64.
    pub fn desk(part_count: usize, cloud_size: usize) -> Self {
        let steps = cloud_size.trailing_zeros() as usize;
        let level_widths = (0..steps).map(|j| (16usize << (j / 2)).min(64)).collect();
        Self {
            cloud_size,
            level_widths,
            bottleneck: 128,
            head_widths: vec![64, 64],
            lift_width: 16,
            ensemble_size: 16,
            subset_size: 32,
            part_count,
        }
    }

    /// Bottom-up steps (= tree depth − 1).
    pub fn steps(&self) -> usize {
        self.level_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.cloud_size.is_power_of_two() || self.cloud_size < 2 {
            return Err(Error::Config(format!(
                "cloud size {} must be a power of two >= 2",
                self.cloud_size
            )));
        }
        let steps = self.cloud_size.trailing_zeros() as usize;
        if self.level_widths.len() != steps {
            return Err(Error::Config(format!(
                "{} level widths for a cloud of {} points (need {steps})",
                self.level_widths.len(),
                self.cloud_size
            )));
        }
        if self.level_widths.iter().any(|&w| w == 0)
            || self.bottleneck == 0
            || self.lift_width == 0
        {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.part_count == 0 {
            return Err(Error::Config("part count must be positive".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble needs at least one tree".into()));
        }
        if self.subset_size < 2 {
            return Err(Error::Config("subset size must be at least 2".into()));
        }
        Ok(())
    }

    /// Encoder width of tree depth `d` nodes (depth 0 = root), where leaves
    /// sit at depth `steps`.
    fn width_at_depth(&self, d: usize) -> usize {
        let s = self.steps();
        if d == s {
            self.lift_width
        } else {
            self.level_widths[s - 1 - d]
        }
    }
}

/// The six gated affine transforms of one level: `ops[s][d]` applies to
/// φ(child) and is gated by `max(0, (−1)^(s+1) · n_d)`.
#[derive(Clone, Debug)]
pub struct PdLevel {
    pub ops: [[Linear; 3]; 2],
}

impl PdLevel {
    pub fn new(name: &str, rng: &mut StreamRng, c_in: usize, c_out: usize) -> Self {
        let axis = ["x", "y", "z"];
        let mk = |s: usize, d: usize, rng: &mut StreamRng| {
            Linear::new(&format!("{name}.s{}.{}", s + 1, axis[d]), rng, c_in, c_out)
        };
        Self {
            ops: [
                [mk(0, 0, rng), mk(0, 1, rng), mk(0, 2, rng)],
                [mk(1, 0, rng), mk(1, 1, rng), mk(1, 2, rng)],
            ],
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for row in &self.ops {
            for l in row {
                l.visit(f);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for row in &mut self.ops {
            for l in row {
                l.visit_mut(f);
            }
        }
    }
}

/// All trainable parameters of one network.
#[derive(Clone, Debug)]
pub struct PdNetParams {
    pub config: PdNetConfig,
    pub lift: Linear,
    pub enc: Vec<PdLevel>,
    pub bottleneck: Linear,
    pub dec: Vec<PdLevel>,
    pub dec_skip: Vec<Linear>,
    pub head: Vec<Linear>,
}

impl PdNetParams {
    pub fn new(rng: &mut StreamRng, config: PdNetConfig) -> Result<Self> {
        config.validate()?;
        let s = config.steps();
        let lift = Linear::new("pdnet.lift", rng, 3, config.lift_width);
        let mut enc = Vec::with_capacity(s);
        for j in 0..s {
            let c_in = if j == 0 {
                config.lift_width
            } else {
                config.level_widths[j - 1]
            };
            enc.push(PdLevel::new(
                &format!("pdnet.enc{j}"),
                rng,
                c_in,
                config.level_widths[j],
            ));
        }
        let bottleneck = Linear::new(
            "pdnet.bottleneck",
            rng,
            config.level_widths[s - 1],
            config.bottleneck,
        );
        let mut dec = Vec::with_capacity(s);
        let mut dec_skip = Vec::with_capacity(s);
        for t in 0..s {
            let parent_w = if t == 0 {
                config.bottleneck
            } else {
                config.width_at_depth(t)
            };
            let target_w = config.width_at_depth(t + 1);
            dec.push(PdLevel::new(
                &format!("pdnet.dec{t}"),
                rng,
                parent_w,
                target_w,
            ));
            dec_skip.push(Linear::new(
                &format!("pdnet.skip{t}"),
                rng,
                2 * target_w,
                target_w,
            ));
        }
        let mut head = Vec::with_capacity(config.head_widths.len() + 1);
        let mut h_in = config.lift_width;
        for (i, &w) in config.head_widths.iter().enumerate() {
            head.push(Linear::new(&format!("pdnet.head{i}"), rng, h_in, w));
            h_in = w;
        }
        head.push(Linear::new("pdnet.out", rng, h_in, config.part_count));
        Ok(Self {
            config,
            lift,
            enc,
            bottleneck,
            dec,
            dec_skip,
            head,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.lift.visit(f);
        for l in &self.enc {
            l.visit(f);
        }
        self.bottleneck.visit(f);
        for l in &self.dec {
            l.visit(f);
        }
        for l in &self.dec_skip {
            l.visit(f);
        }
        for l in &self.head {
            l.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.lift.visit_mut(f);
        for l in &mut self.enc {
            l.visit_mut(f);
        }
        self.bottleneck.visit_mut(f);
        for l in &mut self.dec {
            l.visit_mut(f);
        }
        for l in &mut self.dec_skip {
            l.visit_mut(f);
        }
        for l in &mut self.head {
            l.visit_mut(f);
        }
    }
}

/// `max(0, sign · n_d)` gates per child row; `alphas[s][d][row]`.
type Alphas = [[Vec<f64>; 3]; 2];

/// Gate coefficients for a run of parents: row `2r` is the first child of
/// the `r`-th parent (normal negated), row `2r+1` the second.
fn alphas_for_parents(tree: &BinaryPointTree, first_parent: usize, count: usize) -> Alphas {
    let mut alphas: Alphas = Default::default();
    for s in 0..2 {
        let sign = if s == 0 { -1.0 } else { 1.0 };
        for d in 0..3 {
            let mut col = Vec::with_capacity(2 * count);
            for r in 0..count {
                let n = tree.normals[first_parent + r];
                col.push((sign * -n[d]).max(0.0)); // toward first child
                col.push((sign * n[d]).max(0.0)); // toward second child
            }
            alphas[s][d] = col;
        }
    }
    alphas
}

fn gated_transform(
    tape: &mut Tape,
    binder: &mut Binder,
    children: TensorRef,
    alphas: &Alphas,
    level: &PdLevel,
) -> Result<TensorRef> {
    let phi = tape.relu(children);
    let mut terms = Vec::with_capacity(6);
    for s in 0..2 {
        for d in 0..3 {
            let affine = level.ops[s][d].forward(tape, binder, phi)?;
            terms.push(tape.row_scale(affine, alphas[s][d].clone())?);
        }
    }
    tape.sum_list(&terms)
}

fn unit_check(n: &[f64; 3]) -> Result<()> {
    let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidNormal { norm });
    }
    Ok(())
}

/// One node of the bottom-up recurrence:
/// `v = Σ_{k,d,s} max(0, (−1)^s n_d^k) (W_d^s φ(v_k) + b_d^s)`
/// with `n_k` the unit normal directed toward child `k`.
pub fn pd_node_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    v_child1: &Tensor,
    v_child2: &Tensor,
    n1: &[f64; 3],
    n2: &[f64; 3],
    level: &PdLevel,
) -> Result<TensorRef> {
    unit_check(n1)?;
    unit_check(n2)?;
    if v_child1.len() != v_child2.len() {
        return Err(Error::ShapeMismatch {
            op: "pd_node_forward",
            left: v_child1.shape().to_vec(),
            right: v_child2.shape().to_vec(),
        });
    }
    let c = v_child1.len();
    let mut stacked = Vec::with_capacity(2 * c);
    stacked.extend_from_slice(v_child1.data());
    stacked.extend_from_slice(v_child2.data());
    let children = tape.leaf(Tensor::new(vec![2, c], stacked)?, true);
    let mut alphas: Alphas = Default::default();
    for s in 0..2 {
        let sign = if s == 0 { -1.0 } else { 1.0 };
        for d in 0..3 {
            alphas[s][d] = vec![(sign * n1[d]).max(0.0), (sign * n2[d]).max(0.0)];
        }
    }
    let gated = gated_transform(tape, binder, children, &alphas, level)?;
    tape.pair_sum_rows(gated)
}

/// Bottom-up pass state: every level's representations, kept for skips.
pub struct EncoderState {
    /// `level_reps[j]` holds tree depth `steps − j`; index 0 is the lifted
    /// leaves, index `steps` the root.
    pub level_reps: Vec<TensorRef>,
    pub bottleneck: TensorRef,
}

fn check_tree(tree: &BinaryPointTree, config: &PdNetConfig) -> Result<()> {
    if tree.leaf_count() != config.cloud_size {
        return Err(Error::Config(format!(
            "tree has {} leaves, network wants {}",
            tree.leaf_count(),
            config.cloud_size
        )));
    }
    Ok(())
}

/// Bottom-up pass over one tree.
pub fn encoder_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    tree: &BinaryPointTree,
    params: &PdNetParams,
    config: &PdNetConfig,
) -> Result<EncoderState> {
    check_tree(tree, config)?;
    let s = config.steps();
    let leaf_inputs = tape.constant(tree.leaf_matrix());
    let lifted = params.lift.forward(tape, binder, leaf_inputs)?;
    let mut level_reps = vec![lifted];
    let mut cur = lifted;
    for j in 0..s {
        // parents sit at depth s − 1 − j; their heap indices start at 2^depth
        let parent_depth = s - 1 - j;
        let first_parent = 1usize << parent_depth;
        let count = 1usize << parent_depth;
        let alphas = alphas_for_parents(tree, first_parent, count);
        let gated = gated_transform(tape, binder, cur, &alphas, &params.enc[j])?;
        cur = tape.pair_sum_rows(gated)?;
        level_reps.push(cur);
    }
    let bottleneck = params.bottleneck.forward(tape, binder, cur)?;
    Ok(EncoderState {
        level_reps,
        bottleneck,
    })
}

/// Top-down pass: children from parents through the gated transforms, skip
/// connections merged by concatenation + affine. Returns per-leaf features.
pub fn decoder_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    tree: &BinaryPointTree,
    enc: &EncoderState,
    params: &PdNetParams,
    config: &PdNetConfig,
) -> Result<TensorRef> {
    let s = config.steps();
    if enc.level_reps.len() != s + 1 {
        return Err(Error::Config(format!(
            "encoder state has {} levels, network wants {}",
            enc.level_reps.len(),
            s + 1
        )));
    }
    let mut cur = enc.bottleneck;
    for t in 0..s {
        let first_parent = 1usize << t;
        let count = 1usize << t;
        let doubled = tape.dup_rows(cur)?;
        let alphas = alphas_for_parents(tree, first_parent, count);
        let child_pre = gated_transform(tape, binder, doubled, &alphas, &params.dec[t])?;
        let skip_rep = enc.level_reps[s - 1 - t];
        let merged = tape.concat_cols(&[child_pre, skip_rep])?;
        cur = params.dec_skip[t].forward(tape, binder, merged)?;
    }
    Ok(cur)
}

/// Full forward to per-leaf logits (M×P).
pub fn forward_leaf_logits(
    tape: &mut Tape,
    binder: &mut Binder,
    tree: &BinaryPointTree,
    params: &PdNetParams,
) -> Result<TensorRef> {
    let config = &params.config;
    let enc = encoder_forward(tape, binder, tree, params, config)?;
    let mut x = decoder_forward(tape, binder, tree, &enc, params, config)?;
    for (i, lin) in params.head.iter().enumerate() {
        if i > 0 {
            x = tape.relu(x);
        }
        x = lin.forward(tape, binder, x)?;
    }
    Ok(x)
}

/// Average per-leaf posteriors back onto original points via leaf origins.
fn scatter_posteriors(
    probs: &Tensor,
    tree: &BinaryPointTree,
    point_count: usize,
) -> Result<Tensor> {
    let p = probs.cols();
    let mut acc = vec![0.0; point_count * p];
    let mut counts = vec![0usize; point_count];
    for (slot, &leaf) in tree.leaves.iter().enumerate() {
        let origin = tree.padded.origin[leaf];
        counts[origin] += 1;
        for j in 0..p {
            acc[origin * p + j] += probs.get2(slot, j);
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::Tree(format!(
                "point {i} is not covered by any leaf"
            )));
        }
        for j in 0..p {
            acc[i * p + j] /= c as f64;
        }
    }
    Tensor::new(vec![point_count, p], acc)
}

/// Per-point part posteriors from one tree (rows sum to 1; duplicates
/// sharing an origin are averaged).
pub fn segment_cloud(
    pc: &PointCloud,
    tree: &BinaryPointTree,
    params: &PdNetParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut binder = Binder::eval();
    let logits = forward_leaf_logits(&mut tape, &mut binder, tree, params)?;
    let probs = softmax_rows(tape.value(logits));
    scatter_posteriors(&probs, tree, pc.len())
}

/// Arithmetic mean of per-tree posteriors.
pub fn ensemble_predict(
    pc: &PointCloud,
    trees: &[BinaryPointTree],
    params: &PdNetParams,
) -> Result<Tensor> {
    if trees.is_empty() {
        return Err(Error::Config("ensemble needs at least one tree".into()));
    }
    let per_tree: Vec<Tensor> = trees
        .par_iter()
        .map(|tree| segment_cloud(pc, tree, params))
        .collect::<Result<_>>()?;
    let p = per_tree[0].cols();
    let mut acc = vec![0.0; pc.len() * p];
    for t in &per_tree {
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= trees.len() as f64;
    }
    Tensor::new(vec![pc.len(), p], acc)
}

/// Build the prediction ensemble for one (already normalized) cloud.
pub fn build_ensemble(
    pc: &PointCloud,
    params: &PdNetParams,
    rng: &StreamRng,
) -> Result<Vec<BinaryPointTree>> {
    let padded = pad_to_pow2(pc);
    (0..params.config.ensemble_size)
        .map(|t| {
            let mut tree_rng = rng.fork(&format!("ensemble/{t}"));
            build_pd_randomized(&padded, &mut tree_rng, params.config.subset_size)
        })
        .collect()
}

/// Training settings for the tree network.
#[derive(Clone, Debug)]
pub struct PdTrainOpts {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Stop early once the running train mIoU reaches this value.
    pub target_train_miou: Option<f64>,
}

impl Default for PdTrainOpts {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 8,
            epochs: 30,
            seed: 0,
            augment: AugmentConfig::default(),
            target_train_miou: Some(0.97),
        }
    }
}

/// One epoch's aggregate numbers.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_miou: f64,
}

/// Train on one category: a fresh randomized tree per shape per epoch,
/// cross entropy over leaves, Adam updates per mini-batch. Deterministic
/// given the seed.
pub fn train_pdnet(
    dataset: &DatasetSplit,
    config: &PdNetConfig,
    opts: &PdTrainOpts,
) -> Result<(PdNetParams, Vec<EpochStats>)> {
    train_pdnet_with(dataset, config, opts, &mut |_, _| {})
}

/// [`train_pdnet`] with a per-epoch hook (fired after the optimizer step,
/// before the early-stop check).
pub fn train_pdnet_with(
    dataset: &DatasetSplit,
    config: &PdNetConfig,
    opts: &PdTrainOpts,
    on_epoch: &mut dyn FnMut(&PdNetParams, &EpochStats),
) -> Result<(PdNetParams, Vec<EpochStats>)> {
    config.validate()?;
    if dataset.shapes.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    for shape in &dataset.shapes {
        if shape.labels.is_none() {
            return Err(Error::Data("training shapes must be labelled".into()));
        }
    }
    let root = StreamRng::new(opts.seed, "pdnet");
    let mut init_rng = root.fork("init");
    let mut params = PdNetParams::new(&mut init_rng, config.clone())?;
    let adam = AdamConfig::with_lr(opts.lr);
    let normalized: Vec<PointCloud> = dataset.shapes.iter().map(normalize_unit_ball).collect();

    let mut stats = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..normalized.len()).collect();
        let mut order_rng = root.fork(&format!("order/{epoch}"));
        order_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut epoch_miou = 0.0;
        for batch in order.chunks(opts.batch.max(1)) {
            let results: Vec<Result<ShapePass>> = batch
                .par_iter()
                .map(|&si| {
                    shape_pass(&normalized[si], &params, &root, epoch, si, opts)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut grads_acc: Vec<Option<Vec<f64>>> = Vec::new();
            for result in results {
                let pass = result?;
                epoch_loss += pass.loss;
                epoch_miou += pass.miou;
                if grads_acc.is_empty() {
                    grads_acc = pass.grads;
                } else {
                    for (acc, g) in grads_acc.iter_mut().zip(pass.grads) {
                        match (acc.as_mut(), g) {
                            (Some(a), Some(g)) => {
                                for (x, y) in a.iter_mut().zip(&g) {
                                    *x += y;
                                }
                            }
                            (None, Some(g)) => *acc = Some(g),
                            _ => {}
                        }
                    }
                }
            }
            let mut it = grads_acc.into_iter();
            params.visit_mut(&mut |p| {
                if let Some(Some(mut g)) = it.next() {
                    for v in &mut g {
                        *v *= scale;
                    }
                    p.accumulate_grad(&g);
                } else {
                    p.zero_grad();
                }
            });
            adam_step_params(&mut params, &adam)?;
            params.visit_mut(&mut |p| p.clear_grad());
        }
        let n = normalized.len() as f64;
        let s = EpochStats {
            epoch,
            loss: epoch_loss / n,
            train_miou: epoch_miou / n,
        };
        stats.push(s);
        on_epoch(&params, &s);
        if let Some(target) = opts.target_train_miou {
            if s.train_miou >= target {
                break;
            }
        }
    }
    Ok((params, stats))
}

fn adam_step_params(params: &mut PdNetParams, cfg: &AdamConfig) -> Result<()> {
    let mut err = None;
    params.visit_mut(&mut |p| {
        if err.is_none() {
            if let Err(e) = adam_step([p], cfg) {
                err = Some(e);
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

struct ShapePass {
    loss: f64,
    miou: f64,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_pass(
    shape: &PointCloud,
    params: &PdNetParams,
    root: &StreamRng,
    epoch: usize,
    si: usize,
    opts: &PdTrainOpts,
) -> Result<ShapePass> {
    let mut aug_rng = root.fork(&format!("aug/{epoch}/{si}"));
    let jittered = augment(shape, &mut aug_rng, &opts.augment)?;
    let pc = normalize_unit_ball(&jittered);
    let padded = pad_to_pow2(&pc);
    let mut tree_rng = root.fork(&format!("tree/{epoch}/{si}"));
    let tree = build_pd_randomized(&padded, &mut tree_rng, params.config.subset_size)?;

    let labels = pc.labels.as_ref().expect("validated labelled");
    let leaf_labels: Vec<usize> = tree
        .leaves
        .iter()
        .map(|&leaf| labels[tree.padded.origin[leaf]])
        .collect();

    let mut tape = Tape::new();
    let mut binder = Binder::train();
    let logits = forward_leaf_logits(&mut tape, &mut binder, &tree, params)?;
    let (loss_ref, probs) = tape.softmax_cross_entropy(logits, &leaf_labels)?;
    let loss = tape.value(loss_ref).data()[0];
    tape.backward(loss_ref)?;

    let mut grads = Vec::new();
    params.visit(&mut |p| {
        grads.push(binder.grad_of(&tape, p).map(|g| g.to_vec()));
    });

    let scattered = scatter_posteriors(&probs, &tree, pc.len())?;
    let pred = argmax_labels(&scattered);
    let miou = shape_miou(&pred, labels, params.config.part_count, EmptyUnion::One)?;
    Ok(ShapePass { loss, miou, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ShapeFamily};
    use crate::gradcheck;

    fn tiny_config() -> PdNetConfig {
        PdNetConfig {
            cloud_size: 4,
            level_widths: vec![4, 5],
            bottleneck: 6,
            head_widths: vec![4],
            lift_width: 3,
            ensemble_size: 2,
            subset_size: 2,
            part_count: 2,
        }
    }

    fn tiny_tree(rng: &mut StreamRng) -> BinaryPointTree {
        let pc = PointCloud::new(
            (0..4)
                .map(|_| {
                    [
                        rng.uniform(-1.0, 1.0),
                        rng.uniform(-1.0, 1.0),
                        rng.uniform(-1.0, 1.0),
                    ]
                })
                .collect(),
            None,
            "t",
        )
        .unwrap();
        let padded = pad_to_pow2(&pc);
        build_pd_randomized(&padded, rng, 2).unwrap()
    }

    #[test]
    fn axis_aligned_normal_selects_one_branch() {
        // n1 = n2 = +x: only the s=2, d=x transform survives, with α = 1
        let mut rng = StreamRng::new(1, "pd");
        let level = PdLevel::new("l", &mut rng, 3, 4);
        let v1 = Tensor::new(vec![3], vec![0.5, -0.2, 1.0]).unwrap();
        let v2 = Tensor::new(vec![3], vec![1.5, 0.3, -0.7]).unwrap();
        let n = [1.0, 0.0, 0.0];
        let mut tape = Tape::new();
        let mut binder = Binder::eval();
        let out = pd_node_forward(&mut tape, &mut binder, &v1, &v2, &n, &n, &level).unwrap();
        // expected: sum over children of W_x^2 relu(v) + b_x^2
        let w = level.ops[1][0].w.value.clone();
        let b = level.ops[1][0].b.value.clone();
        let mut expect = vec![0.0; 4];
        for (child, v) in [&v1, &v2].iter().enumerate() {
            let _ = child;
            for j in 0..4 {
                let mut acc = b.data()[j];
                for i in 0..3 {
                    acc += v.data()[i].max(0.0) * w.get2(i, j);
                }
                expect[j] += acc;
            }
        }
        for j in 0..4 {
            assert!((tape.value(out).get2(0, j) - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_sum_is_l1_norm() {
        let mut rng = StreamRng::new(2, "pd");
        for _ in 0..50 {
            let mut n = [
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
            ];
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if norm < 1e-6 {
                continue;
            }
            for v in &mut n {
                *v /= norm;
            }
            let mut total = 0.0;
            for s in 0..2 {
                let sign = if s == 0 { -1.0 } else { 1.0 };
                for d in 0..3 {
                    total += (sign * n[d]).max(0.0);
                }
            }
            let l1: f64 = n.iter().map(|v| v.abs()).sum();
            assert!((total - l1).abs() < 1e-12);
            assert!((1.0 - 1e-9..=3f64.sqrt() + 1e-9).contains(&l1));
        }
    }

    #[test]
    fn node_forward_matches_brute_force() {
        let mut rng = StreamRng::new(3, "pd");
        for _ in 0..100 {
            let c_in = 2 + rng.index(3);
            let c_out = 2 + rng.index(3);
            let level = PdLevel::new("l", &mut rng, c_in, c_out);
            let rand_vec =
                |rng: &mut StreamRng, n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect()
                };
            let v1 = Tensor::new(vec![c_in], rand_vec(&mut rng, c_in)).unwrap();
            let v2 = Tensor::new(vec![c_in], rand_vec(&mut rng, c_in)).unwrap();
            let mut n1 = [
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
            ];
            let norm = (n1[0] * n1[0] + n1[1] * n1[1] + n1[2] * n1[2]).sqrt();
            for v in &mut n1 {
                *v /= norm;
            }
            let n2 = [-n1[0], -n1[1], -n1[2]];

            let mut tape = Tape::new();
            let mut binder = Binder::eval();
            let out =
                pd_node_forward(&mut tape, &mut binder, &v1, &v2, &n1, &n2, &level).unwrap();

            // independent triple-loop evaluation
            let mut expect = vec![0.0; c_out];
            for (k, (v, n)) in [(&v1, &n1), (&v2, &n2)].iter().enumerate() {
                let _ = k;
                for s in 1..=2i32 {
                    let sign = (-1.0f64).powi(s);
                    for d in 0..3 {
                        let alpha = (sign * n[d]).max(0.0);
                        if alpha == 0.0 {
                            continue;
                        }
                        let lin = &level.ops[(s - 1) as usize][d];
                        for j in 0..c_out {
                            let mut acc = lin.b.value.data()[j];
                            for i in 0..c_in {
                                acc += v.data()[i].max(0.0) * lin.w.value.get2(i, j);
                            }
                            expect[j] += alpha * acc;
                        }
                    }
                }
            }
            for j in 0..c_out {
                assert!(
                    (tape.value(out).get2(0, j) - expect[j]).abs() < 1e-12,
                    "mismatch at {j}"
                );
            }
        }
    }

    #[test]
    fn node_forward_rejects_non_unit_normal() {
        let mut rng = StreamRng::new(4, "pd");
        let level = PdLevel::new("l", &mut rng, 2, 2);
        let v = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::eval();
        let bad = [2.0, 0.0, 0.0];
        let good = [1.0, 0.0, 0.0];
        assert!(matches!(
            pd_node_forward(&mut tape, &mut binder, &v, &v, &bad, &good, &level).unwrap_err(),
            Error::InvalidNormal { .. }
        ));
    }

    #[test]
    fn encoder_decoder_shapes() {
        let mut rng = StreamRng::new(5, "pd");
        let config = tiny_config();
        let params = PdNetParams::new(&mut rng, config.clone()).unwrap();
        let tree = tiny_tree(&mut StreamRng::new(6, "tree"));
        let mut tape = Tape::new();
        let mut binder = Binder::eval();
        let enc = encoder_forward(&mut tape, &mut binder, &tree, &params, &config).unwrap();
        assert_eq!(tape.value(enc.level_reps[0]).shape(), &[4, 3]);
        assert_eq!(tape.value(enc.level_reps[1]).shape(), &[2, 4]);
        assert_eq!(tape.value(enc.level_reps[2]).shape(), &[1, 5]);
        assert_eq!(tape.value(enc.bottleneck).shape(), &[1, 6]);
        let dec =
            decoder_forward(&mut tape, &mut binder, &tree, &enc, &params, &config).unwrap();
        assert_eq!(tape.value(dec).shape(), &[4, 3]);
    }

    #[test]
    fn depth_two_tree_is_one_node_application() {
        // two leaves: encoder output equals a single node forward
        let mut rng = StreamRng::new(7, "pd");
        let config = PdNetConfig {
            cloud_size: 2,
            level_widths: vec![4],
            bottleneck: 4,
            head_widths: vec![],
            lift_width: 3,
            ensemble_size: 1,
            subset_size: 2,
            part_count: 2,
        };
        let params = PdNetParams::new(&mut rng, config.clone()).unwrap();
        let pc = PointCloud::new(vec![[0.1, 0.2, 0.3], [-0.5, 0.4, 0.0]], None, "t").unwrap();
        let padded = pad_to_pow2(&pc);
        let tree = build_pd_randomized(&padded, &mut StreamRng::new(8, "t"), 2).unwrap();

        let mut tape = Tape::new();
        let mut binder = Binder::eval();
        let enc = encoder_forward(&mut tape, &mut binder, &tree, &params, &config).unwrap();
        let root = tape.value(enc.level_reps[1]).clone();

        // by hand: lift each leaf then apply the node op
        let mut tape2 = Tape::new();
        let mut binder2 = Binder::eval();
        let leaf_mat = tape2.constant(tree.leaf_matrix());
        let lifted = params.lift.forward(&mut tape2, &mut binder2, leaf_mat).unwrap();
        let l0 = Tensor::new(vec![3], tape2.value(lifted).row(0).to_vec()).unwrap();
        let l1 = Tensor::new(vec![3], tape2.value(lifted).row(1).to_vec()).unwrap();
        let n = tree.normals[1];
        let n1 = [-n[0], -n[1], -n[2]];
        let out = pd_node_forward(
            &mut tape2,
            &mut binder2,
            &l0,
            &l1,
            &n1,
            &n,
            &params.enc[0],
        )
        .unwrap();
        for j in 0..4 {
            assert!((root.get2(0, j) - tape2.value(out).get2(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_leaves_share_lifted_representation() {
        let mut rng = StreamRng::new(9, "pd");
        let config = tiny_config();
        let params = PdNetParams::new(&mut rng, config.clone()).unwrap();
        // 3 points pad to 4: one duplicate pair
        let pc = PointCloud::new(
            vec![[0.0, 0.0, 0.0], [0.4, 0.0, 0.0], [0.0, 0.7, 0.0]],
            None,
            "t",
        )
        .unwrap();
        let padded = pad_to_pow2(&pc);
        let tree = build_pd_randomized(&padded, &mut StreamRng::new(10, "t"), 2).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::eval();
        let enc = encoder_forward(&mut tape, &mut binder, &tree, &params, &config).unwrap();
        let lifted = tape.value(enc.level_reps[0]);
        // find the two leaf slots with the same origin
        let origins = tree.leaf_origins();
        for a in 0..origins.len() {
            for b in a + 1..origins.len() {
                if origins[a] == origins[b] {
                    assert_eq!(lifted.row(a), lifted.row(b));
                }
            }
        }
    }

    #[test]
    fn posteriors_are_distributions_and_ensemble_averages() {
        let mut rng = StreamRng::new(11, "pd");
        let config = tiny_config();
        let params = PdNetParams::new(&mut rng, config).unwrap();
        let pc = PointCloud::new(
            vec![
                [0.2, 0.0, 0.0],
                [-0.3, 0.5, 0.0],
                [0.0, -0.4, 0.6],
                [0.7, 0.1, -0.2],
            ],
            None,
            "t",
        )
        .unwrap();
        let root = StreamRng::new(12, "ens");
        let trees = build_ensemble(&pc, &params, &root).unwrap();
        assert_eq!(trees.len(), 2);
        let single = segment_cloud(&pc, &trees[0], &params).unwrap();
        for i in 0..4 {
            let s: f64 = single.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let avg = ensemble_predict(&pc, &trees, &params).unwrap();
        for i in 0..4 {
            let s: f64 = avg.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        // identical trees average to the single-tree posterior
        let same = ensemble_predict(&pc, &[trees[0].clone(), trees[0].clone()], &params).unwrap();
        assert!(same.approx_eq(&single, 1e-12));
    }

    #[test]
    fn full_gradient_check_on_depth_three_tree() {
        let mut rng = StreamRng::new(13, "pd");
        let config = tiny_config();
        let mut params = PdNetParams::new(&mut rng, config.clone()).unwrap();
        let tree = tiny_tree(&mut StreamRng::new(14, "tree"));
        let labels = vec![0usize, 1, 1, 0];

        // analytic gradients
        let mut tape = Tape::new();
        let mut binder = Binder::train();
        let logits = forward_leaf_logits(&mut tape, &mut binder, &tree, &params).unwrap();
        let (loss, _) = tape.softmax_cross_entropy(logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
        params.visit(&mut |p| {
            analytic.push((
                p.name.clone(),
                binder
                    .grad_of(&tape, p)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.len()]),
            ));
        });

        // numeric: perturb every coordinate of every parameter
        let mut names = Vec::new();
        params.visit(&mut |p| names.push(p.name.clone()));
        for (pi, name) in names.iter().enumerate() {
            let base = {
                let mut v = None;
                let mut i = 0;
                params.visit(&mut |p| {
                    if i == pi {
                        v = Some(p.value.data().to_vec());
                    }
                    i += 1;
                });
                v.unwrap()
            };
            let f = |x: &[f64]| -> f64 {
                let mut tweaked = params.clone();
                let mut i = 0;
                tweaked.visit_mut(&mut |p| {
                    if i == pi {
                        p.value.data_mut().copy_from_slice(x);
                    }
                    i += 1;
                });
                let mut tape = Tape::new();
                let mut binder = Binder::eval();
                let logits =
                    forward_leaf_logits(&mut tape, &mut binder, &tree, &tweaked).unwrap();
                let (loss, _) = tape.softmax_cross_entropy(logits, &labels).unwrap();
                tape.value(loss).data()[0]
            };
            let numeric = gradcheck::central_diff(f, &base, 1e-5);
            let err = gradcheck::max_rel_err(&analytic[pi].1, &numeric);
            assert!(err <= 1e-4, "{name}: rel err {err}");
        }
        let _ = &mut params;
    }

    #[test]
    fn memorization_loss_halves() {
        let mut rng = StreamRng::new(15, "data");
        let dataset = generate_synthetic(ShapeFamily::Barbell, 4, 64, &mut rng).unwrap();
        let config = PdNetConfig {
            cloud_size: 64,
            level_widths: vec![8, 8, 16, 16, 16, 16],
            bottleneck: 32,
            head_widths: vec![16],
            lift_width: 8,
            ensemble_size: 1,
            subset_size: 8,
            part_count: 3,
        };
        let opts = PdTrainOpts {
            lr: 3e-3,
            batch: 4,
            epochs: 50,
            seed: 7,
            augment: AugmentConfig {
                noise_sigma: 0.0,
                scale_range: (1.0, 1.0),
                translate_range: 0.0,
            },
            target_train_miou: None,
        };
        let (_, stats) = train_pdnet(&dataset, &config, &opts).unwrap();
        let first = stats.first().unwrap().loss;
        let last = stats.last().unwrap().loss;
        assert!(
            last <= 0.5 * first,
            "loss {first} -> {last} did not halve in {} epochs",
            stats.len()
        );
    }

    #[test]
    fn training_is_deterministic_and_lr_zero_is_identity() {
        let mut rng = StreamRng::new(16, "data");
        let dataset = generate_synthetic(ShapeFamily::Table, 3, 32, &mut rng).unwrap();
        let config = PdNetConfig {
            cloud_size: 32,
            level_widths: vec![4, 4, 8, 8, 8],
            bottleneck: 8,
            head_widths: vec![],
            lift_width: 4,
            ensemble_size: 1,
            subset_size: 4,
            part_count: 2,
        };
        let opts = PdTrainOpts {
            lr: 1e-3,
            batch: 3,
            epochs: 2,
            seed: 3,
            augment: AugmentConfig::default(),
            target_train_miou: None,
        };
        let (pa, sa) = train_pdnet(&dataset, &config, &opts).unwrap();
        let (pb, sb) = train_pdnet(&dataset, &config, &opts).unwrap();
        for (a, b) in sa.iter().zip(&sb) {
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.train_miou, b.train_miou);
        }
        let mut va = Vec::new();
        pa.visit(&mut |p| va.push(p.value.clone()));
        let mut vb = Vec::new();
        pb.visit(&mut |p| vb.push(p.value.clone()));
        assert_eq!(va, vb);

        // lr = 0 leaves the initialization untouched
        let zero = PdTrainOpts {
            lr: 0.0,
            epochs: 1,
            ..opts
        };
        let (pz, _) = train_pdnet(&dataset, &config, &zero).unwrap();
        let mut init_rng = StreamRng::new(3, "pdnet").fork("init");
        let fresh = PdNetParams::new(&mut init_rng, config).unwrap();
        let mut vz = Vec::new();
        pz.visit(&mut |p| vz.push(p.value.clone()));
        let mut vf = Vec::new();
        fresh.visit(&mut |p| vf.push(p.value.clone()));
        assert_eq!(vz, vf);
    }
}
