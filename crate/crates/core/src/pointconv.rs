//! Learned neighborhood-weighting convolution over point sets.
//!
//! For each query point, the K nearest source points are gathered; a small
//! MLP maps their centered coordinates to a K×K weighting matrix W that
//! reorders and mixes the gathered feature rows (`F_g = W × F`), and a
//! learned kernel then convolves the aligned block down to the output
//! channels. When W approximates a permutation matrix the operator is
//! aligning point order; when it blends rows it is weighting by shape —
//! the network decides.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Binder, Linear, Param, Tape, Tensor, TensorRef};

/// K-nearest-neighbor table for a batch of queries.
#[derive(Clone, Debug)]
pub struct NeighborhoodBatch {
    /// Q·K source indices, row-major per query.
    pub indices: Vec<usize>,
    /// Q×3K query-centered neighbor coordinates.
    pub centered: Tensor,
    pub k: usize,
    pub source_count: usize,
}

impl NeighborhoodBatch {
    pub fn query_count(&self) -> usize {
        self.indices.len() / self.k
    }
}

fn lex_cmp(a: &[f64; 3], b: &[f64; 3]) -> std::cmp::Ordering {
    for d in 0..3 {
        match a[d].partial_cmp(&b[d]).expect("finite coordinates") {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

/// K nearest sources per query by L2 distance; ties break by lexicographic
/// point then smaller index. With fewer than K sources, indices repeat
/// cyclically over the distance-sorted list.
pub fn knn_neighborhood(
    sources: &[[f64; 3]],
    queries: &[[f64; 3]],
    k: usize,
) -> Result<NeighborhoodBatch> {
    let m = sources.len();
    if m == 0 {
        return Err(Error::Data("knn needs at least one source point".into()));
    }
    if k == 0 {
        return Err(Error::Config("neighborhood size k must be positive".into()));
    }
    let q = queries.len();
    let mut indices = Vec::with_capacity(q * k);
    let mut centered = vec![0.0; q * 3 * k];
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for (qi, query) in queries.iter().enumerate() {
        order.clear();
        order.extend(0..m);
        let d2 = |i: usize| -> f64 {
            let p = sources[i];
            (p[0] - query[0]).powi(2) + (p[1] - query[1]).powi(2) + (p[2] - query[2]).powi(2)
        };
        order.sort_unstable_by(|&a, &b| {
            d2(a)
                .partial_cmp(&d2(b))
                .expect("finite distance")
                .then_with(|| lex_cmp(&sources[a], &sources[b]))
                .then(a.cmp(&b))
        });
        for slot in 0..k {
            let src = order[slot % m];
            indices.push(src);
            for d in 0..3 {
                centered[(qi * k + slot) * 3 + d] = sources[src][d] - query[d];
            }
        }
    }
    Ok(NeighborhoodBatch {
        indices,
        centered: Tensor::new(vec![q, 3 * k], centered)?,
        k,
        source_count: m,
    })
}

/// Farthest-point sampling of `target` indices, seeded at the
/// lexicographically smallest point. Deterministic; returned in selection
/// order.
pub fn fps_downsample(points: &[[f64; 3]], target: usize) -> Result<Vec<usize>> {
    let m = points.len();
    if target == 0 || target > m {
        return Err(Error::Data(format!(
            "cannot sample {target} of {m} points"
        )));
    }
    let mut seed = 0usize;
    for i in 1..m {
        if lex_cmp(&points[i], &points[seed]) == std::cmp::Ordering::Less {
            seed = i;
        }
    }
    let mut selected = Vec::with_capacity(target);
    selected.push(seed);
    let d2 = |a: usize, b: usize| -> f64 {
        (points[a][0] - points[b][0]).powi(2)
            + (points[a][1] - points[b][1]).powi(2)
            + (points[a][2] - points[b][2]).powi(2)
    };
    let mut min_dist: Vec<f64> = (0..m).map(|i| d2(i, seed)).collect();
    while selected.len() < target {
        let mut best = 0usize;
        for i in 1..m {
            let better = min_dist[i] > min_dist[best]
                || (min_dist[i] == min_dist[best]
                    && (lex_cmp(&points[i], &points[best]) == std::cmp::Ordering::Less));
            if better {
                best = i;
            }
        }
        selected.push(best);
        for i in 0..m {
            let d = d2(i, best);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    Ok(selected)
}

/// One convolution layer: the weighting MLP `s`, the kernel, and a bias.
#[derive(Clone, Debug)]
pub struct PointConvLayer {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Maps flattened centered coordinates (3K) to the K×K weighting matrix.
    pub s_mlp: Vec<Linear>,
    /// Flattened kernel: (K·C_in) × C_out.
    pub kernel: Param,
    pub bias: Param,
}

impl PointConvLayer {
    pub fn new(
        name: &str,
        rng: &mut StreamRng,
        k: usize,
        c_in: usize,
        c_out: usize,
        s_hidden: usize,
    ) -> Self {
        let s_mlp = vec![
            Linear::new(&format!("{name}.s0"), rng, 3 * k, s_hidden),
            Linear::new(&format!("{name}.s1"), rng, s_hidden, k * k),
        ];
        Self {
            k,
            c_in,
            c_out,
            s_mlp,
            kernel: Param::glorot(format!("{name}.kernel"), rng, k * c_in, c_out),
            bias: Param::zeros(format!("{name}.b"), vec![c_out]),
        }
    }

    /// Freeze the weighting MLP to always emit `w` (a K×K matrix).
    /// Used to pin the operator to identity or permutation weighting.
    pub fn freeze_weighting(&mut self, w: &Tensor) {
        let last = self.s_mlp.last_mut().expect("s-mlp layers");
        last.w.value = Tensor::zeros(last.w.value.shape().to_vec());
        last.b.value = Tensor::new(vec![self.k * self.k], w.data().to_vec()).expect("k*k bias");
    }

    /// Per-query output features: gather F by the neighbor table, weight by
    /// `s(centered coords)`, then convolve to C_out.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &NeighborhoodBatch,
        features: TensorRef,
    ) -> Result<TensorRef> {
        let (m, c) = (tape.value(features).rows(), tape.value(features).cols());
        if c != self.c_in {
            return Err(Error::ShapeMismatch {
                op: "pointconv",
                left: vec![m, c],
                right: vec![self.c_in],
            });
        }
        if m != batch.source_count {
            return Err(Error::ShapeMismatch {
                op: "pointconv",
                left: vec![m],
                right: vec![batch.source_count],
            });
        }
        if batch.k != self.k {
            return Err(Error::Config(format!(
                "neighborhood k {} does not match layer k {}",
                batch.k, self.k
            )));
        }
        let q = batch.query_count();

        // weighting matrices from the centered coordinates
        let mut w = tape.constant(batch.centered.clone());
        for (i, lin) in self.s_mlp.iter().enumerate() {
            w = lin.forward(tape, binder, w)?;
            if i + 1 < self.s_mlp.len() {
                w = tape.relu(w);
            }
        }

        // gather neighbor features and align them
        let idx: Vec<Option<usize>> = batch.indices.iter().map(|&i| Some(i)).collect();
        let gathered = tape.gather_rows(features, &idx)?;
        let packed = tape.reshape(gathered, vec![q, self.k * self.c_in])?;
        let aligned = tape.bmm(w, packed, self.k, self.k, self.c_in)?;

        // convolve: out[c'] = bias + sum_{k,c} kernel[k,c,c'] * aligned[k,c]
        let kernel = binder.bind(tape, &self.kernel);
        let b = binder.bind(tape, &self.bias);
        let out = tape.matmul(aligned, kernel)?;
        tape.add_rowvec(out, b)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for l in &self.s_mlp {
            l.visit(f);
        }
        f(&self.kernel);
        f(&self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.s_mlp {
            l.visit_mut(f);
        }
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

/// Conv-DeConv segmentation network configuration.
#[derive(Clone, Debug)]
pub struct PointCnnConfig {
    pub k: usize,
    /// Encoder level sizes after downsampling, strictly decreasing.
    pub enc_points: Vec<usize>,
    /// Encoder output channels per level.
    pub enc_channels: Vec<usize>,
    pub s_hidden: usize,
    pub part_count: usize,
}

impl PointCnnConfig {
    /// Desk default: 1024 -> 256 -> 64 points, channels 3 -> 32 -> 64,
    /// decode 64 -> 32 -> P, K = 8.
    pub fn desk(part_count: usize) -> Self {
        Self {
            k: 8,
            enc_points: vec![256, 64],
            enc_channels: vec![32, 64],
            s_hidden: 64,
            part_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.enc_points.is_empty() || self.enc_points.len() != self.enc_channels.len() {
            return Err(Error::Config(
                "encoder point and channel schedules must be non-empty and equal length".into(),
            ));
        }
        for w in self.enc_points.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config(format!(
                    "encoder points must strictly decrease, got {:?}",
                    self.enc_points
                )));
            }
        }
        if self.part_count == 0 {
            return Err(Error::Config("part count must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder levels downsample by farthest-point sampling and convolve;
/// decoder levels query the finer level's points from the coarser level's
/// features, merging skips by concatenation + affine.
#[derive(Clone, Debug)]
pub struct PointCnnNet {
    pub config: PointCnnConfig,
    pub enc: Vec<PointConvLayer>,
    pub dec: Vec<PointConvLayer>,
    pub dec_skip: Vec<Linear>,
    pub head: Linear,
}

impl PointCnnNet {
    pub fn new(rng: &mut StreamRng, config: PointCnnConfig) -> Result<Self> {
        config.validate()?;
        let levels = config.enc_points.len();
        let mut enc = Vec::with_capacity(levels);
        let mut c_prev = 3;
        for (i, &c) in config.enc_channels.iter().enumerate() {
            enc.push(PointConvLayer::new(
                &format!("pcnn.enc{i}"),
                rng,
                config.k,
                c_prev,
                c,
                config.s_hidden,
            ));
            c_prev = c;
        }
        // decoder mirrors the encoder; level l decodes to the l-th finer set
        let mut dec = Vec::with_capacity(levels);
        let mut dec_skip = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let c_coarse = config.enc_channels[i];
            let c_fine = if i == 0 { 3 } else { config.enc_channels[i - 1] };
            let c_target = if i == 0 {
                *config.enc_channels.first().expect("non-empty")
            } else {
                config.enc_channels[i - 1]
            };
            let li = levels - 1 - i;
            dec.push(PointConvLayer::new(
                &format!("pcnn.dec{li}"),
                rng,
                config.k,
                c_coarse,
                c_target,
                config.s_hidden,
            ));
            dec_skip.push(Linear::new(
                &format!("pcnn.skip{li}"),
                rng,
                c_target + c_fine,
                c_target,
            ));
        }
        let head_in = *config.enc_channels.first().expect("non-empty");
        let head = Linear::new("pcnn.head", rng, head_in, config.part_count);
        Ok(Self {
            config,
            enc,
            dec,
            dec_skip,
            head,
        })
    }

    /// Per-point logits (N×P) for a normalized cloud.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        points: &[[f64; 3]],
    ) -> Result<TensorRef> {
        let n = points.len();
        if n <= self.config.enc_points[0] {
            return Err(Error::Config(format!(
                "cloud of {n} points cannot downsample to {}",
                self.config.enc_points[0]
            )));
        }
        // encoder: downsample, gather, convolve
        let coords: Vec<f64> = points.iter().flatten().copied().collect();
        let mut level_points: Vec<Vec<[f64; 3]>> = vec![points.to_vec()];
        let mut level_feats: Vec<TensorRef> =
            vec![tape.constant(Tensor::new(vec![n, 3], coords)?)];
        for (i, layer) in self.enc.iter().enumerate() {
            let prev_points = level_points[i].clone();
            let idx = fps_downsample(&prev_points, self.config.enc_points[i])?;
            let q_points: Vec<[f64; 3]> = idx.iter().map(|&j| prev_points[j]).collect();
            let batch = knn_neighborhood(&prev_points, &q_points, self.config.k)?;
            let conv = layer.forward(tape, binder, &batch, level_feats[i])?;
            level_feats.push(tape.relu(conv));
            level_points.push(q_points);
        }
        // decoder: queries are the finer level's points
        let levels = self.enc.len();
        let mut cur = *level_feats.last().expect("levels");
        for (li, i) in (0..levels).rev().enumerate() {
            let sources = &level_points[i + 1];
            let queries = &level_points[i];
            let batch = knn_neighborhood(sources, queries, self.config.k)?;
            let up = self.dec[li].forward(tape, binder, &batch, cur)?;
            let merged = tape.concat_cols(&[up, level_feats[i]])?;
            let skipped = self.dec_skip[li].forward(tape, binder, merged)?;
            cur = tape.relu(skipped);
        }
        self.head.forward(tape, binder, cur)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for l in &self.enc {
            l.visit(f);
        }
        for l in &self.dec {
            l.visit(f);
        }
        for l in &self.dec_skip {
            l.visit(f);
        }
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.enc {
            l.visit_mut(f);
        }
        for l in &mut self.dec {
            l.visit_mut(f);
        }
        for l in &mut self.dec_skip {
            l.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_matrix(k: usize) -> Tensor {
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            data[i * k + i] = 1.0;
        }
        Tensor::new(vec![k, k], data).unwrap()
    }

    #[test]
    fn knn_query_on_source() {
        let sources = vec![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let batch = knn_neighborhood(&sources, &[[1.0, 2.0, 3.0]], 1).unwrap();
        assert_eq!(batch.indices, vec![0]);
        assert_eq!(batch.centered.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn knn_repeats_cyclically_when_short() {
        let sources = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let batch = knn_neighborhood(&sources, &[[0.1, 0.0, 0.0]], 4).unwrap();
        assert_eq!(batch.indices, vec![0, 1, 0, 1]);
    }

    #[test]
    fn knn_matches_exhaustive_oracle() {
        let mut rng = StreamRng::new(31, "knn");
        let sources: Vec<[f64; 3]> = (0..64)
            .map(|_| {
                [
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                ]
            })
            .collect();
        let queries: Vec<[f64; 3]> = (0..8)
            .map(|_| {
                [
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                ]
            })
            .collect();
        let k = 8;
        let batch = knn_neighborhood(&sources, &queries, k).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            // oracle: repeatedly extract the closest unused source
            let d2 = |i: usize| {
                (sources[i][0] - q[0]).powi(2)
                    + (sources[i][1] - q[1]).powi(2)
                    + (sources[i][2] - q[2]).powi(2)
            };
            let mut used = vec![false; sources.len()];
            for slot in 0..k {
                let mut best: Option<usize> = None;
                for i in 0..sources.len() {
                    if used[i] {
                        continue;
                    }
                    best = Some(match best {
                        None => i,
                        Some(b) => {
                            if d2(i) < d2(b) {
                                i
                            } else {
                                b
                            }
                        }
                    });
                }
                let b = best.unwrap();
                used[b] = true;
                assert_eq!(batch.indices[qi * k + slot], b, "query {qi} slot {slot}");
            }
        }
    }

    #[test]
    fn fps_full_sample_returns_everything() {
        let points: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let idx = fps_downsample(&points, 5).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fps_collinear_selects_endpoints() {
        let points = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ];
        let idx = fps_downsample(&points, 2).unwrap();
        assert_eq!(idx, vec![0, 3]);
    }

    #[test]
    fn fps_is_deterministic() {
        let mut rng = StreamRng::new(3, "fps");
        let points: Vec<[f64; 3]> = (0..128)
            .map(|_| {
                [
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                ]
            })
            .collect();
        assert_eq!(
            fps_downsample(&points, 32).unwrap(),
            fps_downsample(&points, 32).unwrap()
        );
    }

    #[test]
    fn fps_rejects_oversample() {
        let points = vec![[0.0; 3]; 4];
        assert!(fps_downsample(&points, 5).is_err());
    }

    #[test]
    fn identity_weighting_reduces_to_gathered_conv() {
        let mut rng = StreamRng::new(7, "pc");
        let k = 4;
        let (c_in, c_out) = (3, 2);
        let mut layer = PointConvLayer::new("l", &mut rng, k, c_in, c_out, 16);
        layer.freeze_weighting(&identity_matrix(k));
        let sources: Vec<[f64; 3]> = (0..6)
            .map(|i| [i as f64 * 0.1, (i as f64 * 0.3).sin(), 0.0])
            .collect();
        let queries = vec![sources[2], sources[5]];
        let batch = knn_neighborhood(&sources, &queries, k).unwrap();
        let feats_t = Tensor::new(
            vec![6, c_in],
            (0..18).map(|i| (i as f64 * 0.37).cos()).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::eval();
        let feats = tape.constant(feats_t.clone());
        let out = layer.forward(&mut tape, &mut binder, &batch, feats).unwrap();
        // closed form: out[q,c'] = b[c'] + sum_{slot,c} T[slot,c,c'] F[idx,c]
        let kernel = layer.kernel.value.data();
        for q in 0..2 {
            for co in 0..c_out {
                let mut expect = layer.bias.value.data()[co];
                for slot in 0..k {
                    let src = batch.indices[q * k + slot];
                    for ci in 0..c_in {
                        expect += kernel[(slot * c_in + ci) * c_out + co] * feats_t.get2(src, ci);
                    }
                }
                assert!(
                    (tape.value(out).get2(q, co) - expect).abs() < 1e-12,
                    "q={q} co={co}"
                );
            }
        }
    }

    #[test]
    fn permutation_weighting_permutes_neighbor_rows() {
        let mut rng = StreamRng::new(8, "pc");
        let k = 3;
        let (c_in, c_out) = (2, 2);
        // permutation pi: slot r reads row pi(r)
        let pi = [2usize, 0, 1];
        let mut perm = Tensor::zeros(vec![k, k]);
        for (r, &p) in pi.iter().enumerate() {
            perm.data_mut()[r * k + p] = 1.0;
        }
        let mut perm_layer = PointConvLayer::new("l", &mut rng, k, c_in, c_out, 8);
        let mut id_layer = perm_layer.clone();
        perm_layer.freeze_weighting(&perm);
        id_layer.freeze_weighting(&identity_matrix(k));

        let sources = vec![[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, 0.5, 0.0]];
        let queries = vec![[0.1, 0.1, 0.0]];
        let batch = knn_neighborhood(&sources, &queries, k).unwrap();
        let feats_t = Tensor::from_rows(&[
            vec![1.0, -1.0],
            vec![2.0, 0.5],
            vec![-0.5, 3.0],
        ])
        .unwrap();

        // permuted-gather batch: slot r reads what slot pi(r) read
        let mut perm_batch = batch.clone();
        for r in 0..k {
            perm_batch.indices[r] = batch.indices[pi[r]];
            for d in 0..3 {
                // centered coords ride along with the permutation
                let src = perm_batch.indices[r];
                perm_batch.centered.data_mut()[r * 3 + d] = sources[src][d] - queries[0][d];
            }
        }

        // separate tapes: the two layers share parameter ids through clone
        let mut tape_a = Tape::new();
        let mut binder_a = Binder::eval();
        let feats_a = tape_a.constant(feats_t.clone());
        let out_perm = perm_layer
            .forward(&mut tape_a, &mut binder_a, &batch, feats_a)
            .unwrap();
        let mut tape_b = Tape::new();
        let mut binder_b = Binder::eval();
        let feats_b = tape_b.constant(feats_t);
        let out_id = id_layer
            .forward(&mut tape_b, &mut binder_b, &perm_batch, feats_b)
            .unwrap();
        for c in 0..c_out {
            assert!(
                (tape_a.value(out_perm).get2(0, c) - tape_b.value(out_id).get2(0, c)).abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn segnet_forward_shapes_and_level_structure() {
        let mut rng = StreamRng::new(9, "net");
        let mut config = PointCnnConfig::desk(3);
        config.enc_points = vec![16, 4];
        config.enc_channels = vec![8, 16];
        config.k = 4;
        let net = PointCnnNet::new(&mut rng, config).unwrap();
        // decoder queries outnumber their sources by construction
        assert!(64 > 16 && 16 > 4);
        let points: Vec<[f64; 3]> = (0..64)
            .map(|i| {
                let t = i as f64 * 0.1;
                [t.sin(), t.cos(), t * 0.05]
            })
            .collect();
        let mut tape = Tape::new();
        let mut binder = Binder::eval();
        let logits = net.forward(&mut tape, &mut binder, &points).unwrap();
        assert_eq!(tape.value(logits).shape(), &[64, 3]);
    }

    #[test]
    fn config_validation() {
        assert!(PointCnnConfig {
            k: 0,
            ..PointCnnConfig::desk(2)
        }
        .validate()
        .is_err());
        assert!(PointCnnConfig {
            enc_points: vec![64, 64],
            ..PointCnnConfig::desk(2)
        }
        .validate()
        .is_err());
        assert!(PointCnnConfig::desk(2).validate().is_ok());
    }
}
