//! Patch embedding, selective-scan encoder and coarse-plus-folding decoder.

use crate::alignment::{cdca, cdsa, total_loss, AlignParams, LossBreakdown};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::rng::SplitMix64;
use crate::ssm::{mamba_block, SsmBlockParams, SsmDims};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::zorder::{cdps, scan_single, PatchSet};

use super::config::ModelConfig;

/// Half-extent of the folding seed lattice.
pub const FOLD_SEED_EXTENT: f64 = 0.05;

/// Sinusoidal encoding of patch centers.
///
/// Channel `j` encodes axis `j % 3` at frequency index `i = j / 3`: `sin`
/// for even `i`, `cos` for odd, with angular frequency
/// `π·2^(5·⌊i/2⌋ / max(1, P−1))` where `P = ⌈(D/3)/2⌉`.
pub fn positional_encoding(centers: &[[f64; 3]], d: usize) -> Vec<f64> {
    let per_axis = d.div_ceil(3);
    let pairs = per_axis.div_ceil(2);
    let span = (pairs.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(centers.len() * d);
    for c in centers {
        for j in 0..d {
            let (axis, i) = (j % 3, j / 3);
            let omega = std::f64::consts::PI * 2f64.powf(5.0 * (i / 2) as f64 / span);
            let arg = omega * c[axis];
            out.push(if i % 2 == 0 { arg.sin() } else { arg.cos() });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub coarse_hidden: Linear,
    pub coarse_out: Linear,
    pub fold_global: Linear,
    pub fold_seed: Linear,
    pub fold_coarse: Linear,
    pub fold_out: Linear,
}

/// Parameter layout of the whole network.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed_1: Linear,
    pub embed_2: Linear,
    pub blocks: Vec<SsmBlockParams>,
    pub decoder: Decoder,
    pub align: AlignParams,
}

/// Graph handles of one training forward.
#[derive(Debug, Clone, Copy)]
pub struct TrainNodes {
    pub pred: NodeId,
    pub features_s: NodeId,
    pub features_t: Option<NodeId>,
    pub loss_cd: NodeId,
    pub l_sp: Option<NodeId>,
    pub l_ch: Option<NodeId>,
    pub total: NodeId,
}

impl TrainNodes {
    pub fn breakdown(&self, g: &Graph, cfg: &ModelConfig) -> Result<LossBreakdown> {
        let val = |n: Option<NodeId>| {
            n.map(|n| g.value(n).item())
                .transpose()
                .map(|v| v.unwrap_or(0.0))
        };
        let b = total_loss(
            g.value(self.loss_cd).item()?,
            val(self.l_sp)?,
            val(self.l_ch)?,
            cfg.lambda,
            cfg.beta,
        )?;
        Ok(LossBreakdown {
            total: g.value(self.total).item()?,
            ..b
        })
    }
}

/// Completed clouds plus pooled encoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub clouds: Vec<PointCloud>,
    /// `B×D`, max over patches.
    pub pooled: Vec<Vec<f64>>,
}

impl Model {
    /// Deterministic initialisation from `cfg.seed`. Alignment parameters
    /// come from their own stream, so toggling alignment never changes the
    /// backbone's initial weights.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut root = SplitMix64::new(cfg.seed);
        let mut rng = root.fork(1);
        let mut align_rng = root.fork(2);
        let mut store = ParamStore::new();
        let d = cfg.d;
        let embed_1 = Linear::new(&mut store, "embed.1", 3, d / 2, true, &mut rng);
        let embed_2 = Linear::new(&mut store, "embed.2", d / 2, d, true, &mut rng);
        let dims = SsmDims::standard(d, cfg.n_state);
        let blocks = (0..cfg.n_blocks)
            .map(|i| SsmBlockParams::new(&mut store, &format!("block{i}"), dims, &mut rng))
            .collect();
        let c3 = cfg.coarse_points * 3;
        let decoder = Decoder {
            coarse_hidden: Linear::new(&mut store, "dec.coarse.1", d, d, true, &mut rng),
            coarse_out: Linear::new(&mut store, "dec.coarse.2", d, c3, true, &mut rng),
            fold_global: Linear::new(&mut store, "dec.fold.global", d, d, true, &mut rng),
            fold_seed: Linear::new(&mut store, "dec.fold.seed", 2, d, false, &mut rng),
            fold_coarse: Linear::new(&mut store, "dec.fold.coarse", 3, d, false, &mut rng),
            fold_out: Linear::new(&mut store, "dec.fold.2", d, 3, true, &mut rng),
        };
        let align = AlignParams::new(&mut store, d, cfg.s, &mut align_rng)?;
        Ok(Self {
            cfg,
            store,
            embed_1,
            embed_2,
            blocks,
            decoder,
            align,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Per-patch embedding `[B×G×D]`: shared MLP on center-relative
    /// coordinates, max over each patch, plus the center encoding.
    pub fn embed(&self, g: &mut Graph, p: &Bound, patches: &[PatchSet]) -> Result<NodeId> {
        let (b, gp, k, d) = self.check_patches(patches)?;
        let mut rel = Vec::with_capacity(b * gp * k * 3);
        let mut centers = Vec::with_capacity(b * gp);
        for ps in patches {
            for gi in 0..gp {
                let c = ps.centers[gi];
                for q in ps.patch(gi) {
                    rel.extend([q[0] - c[0], q[1] - c[1], q[2] - c[2]]);
                }
                centers.push(c);
            }
        }
        let x = g.constant(Tensor::new(vec![b * gp * k, 3], rel)?);
        let h = self.embed_1.forward(g, p, x)?;
        let h = g.relu(h);
        let h = self.embed_2.forward(g, p, h)?;
        let h = g.reshape(h, vec![b * gp, k, d])?;
        let pooled = g.max(h, 1)?;
        let pooled = g.reshape(pooled, vec![b, gp, d])?;
        let pe = g.constant(Tensor::new(
            vec![b, gp, d],
            positional_encoding(&centers, d),
        )?);
        g.add(pooled, pe)
    }

    fn check_patches(&self, patches: &[PatchSet]) -> Result<(usize, usize, usize, usize)> {
        if patches.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        for ps in patches {
            if ps.g != self.cfg.g || ps.k != self.cfg.k {
                return Err(Error::Dimension(format!(
                    "patch set {}×{} does not match config G = {}, K = {}",
                    ps.g, ps.k, self.cfg.g, self.cfg.k
                )));
            }
        }
        Ok((patches.len(), self.cfg.g, self.cfg.k, self.cfg.d))
    }

    /// Decodes `[B×G×D]` features to `[B×N_out×3]`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, feats: NodeId) -> Result<NodeId> {
        let b = g.shape(feats)[0];
        let (d, c) = (self.cfg.d, self.cfg.coarse_points);
        let fg = self.cfg.fold_grid;
        let f = fg.points();
        let dec = &self.decoder;
        let global = g.max(feats, 1)?;
        let h = dec.coarse_hidden.forward(g, p, global)?;
        let h = g.relu(h);
        let coarse = dec.coarse_out.forward(g, p, h)?;
        let coarse = g.reshape(coarse, vec![b * c, 3])?;

        // first folding layer on [global ‖ seed ‖ coarse], split by input part
        let hg = dec.fold_global.forward(g, p, global)?;
        let hg = g.reshape(hg, vec![b, 1, 1, d])?;
        let seeds = g.constant(Tensor::new(vec![f, 2], fold_seeds(fg.rows, fg.cols))?);
        let hs = dec.fold_seed.forward(g, p, seeds)?;
        let hs = g.reshape(hs, vec![1, 1, f, d])?;
        let hc = dec.fold_coarse.forward(g, p, coarse)?;
        let hc = g.reshape(hc, vec![b, c, 1, d])?;
        let h = g.add(hc, hg)?;
        let h = g.add(h, hs)?;
        let h = g.relu(h);
        let h = g.reshape(h, vec![b * c * f, d])?;
        let off = dec.fold_out.forward(g, p, h)?;
        let off = g.reshape(off, vec![b, c, f, 3])?;
        let base = g.reshape(coarse, vec![b, c, 1, 3])?;
        let fine = g.add(base, off)?;
        g.reshape(fine, vec![b, c * f, 3])
    }

    fn encode_plain(&self, g: &mut Graph, p: &Bound, mut x: NodeId) -> Result<NodeId> {
        for blk in &self.blocks {
            x = mamba_block(g, p, blk, x)?;
        }
        Ok(x)
    }

    /// Inference graph: embed, encode, decode. Returns `(pred, features)`.
    pub fn forward_infer(
        &self,
        g: &mut Graph,
        p: &Bound,
        patches: &[PatchSet],
    ) -> Result<(NodeId, NodeId)> {
        let x = self.embed(g, p, patches)?;
        let feats = self.encode_plain(g, p, x)?;
        Ok((self.decode(g, p, feats)?, feats))
    }

    /// Paired training graph. `target` is `None` when alignment is off, in
    /// which case the forward is source-only supervised training.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        p: &Bound,
        source: &[PatchSet],
        target: Option<&[PatchSet]>,
        gt: &[PointCloud],
    ) -> Result<TrainNodes> {
        if gt.len() != source.len() {
            return Err(Error::Usage(format!(
                "training needs one ground-truth cloud per source sample ({} for {})",
                gt.len(),
                source.len()
            )));
        }
        let cfg = &self.cfg;
        let xs = self.embed(g, p, source)?;
        let (feats_s, feats_t, l_sp, l_ch) = match target.filter(|_| cfg.aligns()) {
            None => (self.encode_plain(g, p, xs)?, None, None, None),
            Some(tgt) => {
                if tgt.len() != source.len() {
                    return Err(Error::Usage(
                        "source and target batches differ in size".into(),
                    ));
                }
                let xt = self.embed(g, p, tgt)?;
                let (fs, ft, sp, ch) = self.encode_paired(g, p, xs, xt)?;
                (fs, Some(ft), sp, ch)
            }
        };
        let pred = self.decode(g, p, feats_s)?;
        let gt_node = g.constant(stack_clouds(gt)?);
        let loss_cd = g.chamfer(pred, gt_node)?;
        let mut total = loss_cd;
        for (l, w) in [(l_sp, cfg.lambda), (l_ch, cfg.beta)] {
            if let Some(l) = l {
                let weighted = g.affine(l, w, 0.0);
                total = g.add(total, weighted)?;
            }
        }
        Ok(TrainNodes {
            pred,
            features_s: feats_s,
            features_t: feats_t,
            loss_cd,
            l_sp,
            l_ch,
            total,
        })
    }

    /// Encoder with alignment taps on `[B×G×D]` streams.
    fn encode_paired(
        &self,
        g: &mut Graph,
        p: &Bound,
        mut xs: NodeId,
        mut xt: NodeId,
    ) -> Result<(NodeId, NodeId, Option<NodeId>, Option<NodeId>)> {
        let cfg = &self.cfg;
        let route = cfg.route_modulated;
        let (mut sp_terms, mut ch_terms) = (Vec::new(), Vec::new());
        let last = self.blocks.len() - 1;
        for (i, blk) in self.blocks.iter().enumerate() {
            xs = mamba_block(g, p, blk, xs)?;
            xt = mamba_block(g, p, blk, xt)?;
            if !(cfg.tap_every_block || i == last) {
                continue;
            }
            // alignment works on B×D×G
            let mut a = g.transpose_last(xs)?;
            let mut b = g.transpose_last(xt)?;
            if cfg.cdsa {
                let out = cdsa(g, a, b, p.id(self.align.spatial_kernel), route)?;
                sp_terms.push(out.l_sp);
                (a, b) = (out.x_s_mod, out.x_t_mod);
            }
            if cfg.cdca {
                let out = cdca(g, p, &self.align, a, b, route)?;
                ch_terms.push(out.l_ch);
                (a, b) = (out.f_s_mod, out.f_t_mod);
            }
            xs = g.transpose_last(a)?;
            xt = g.transpose_last(b)?;
        }
        let l_sp = mean_of(g, &sp_terms)?;
        let l_ch = mean_of(g, &ch_terms)?;
        Ok((xs, xt, l_sp, l_ch))
    }

    /// Scans a source/target pair according to `cfg.cdps`.
    pub fn scan_pair(
        &self,
        source: &PointCloud,
        target: &PointCloud,
    ) -> Result<(PatchSet, PatchSet)> {
        let c = &self.cfg;
        if c.cdps {
            let (a, b, _) = cdps(source, target, c.g, c.k, c.bits)?;
            Ok((a, b))
        } else {
            Ok((
                scan_single(source, c.g, c.k, c.bits)?,
                scan_single(target, c.g, c.k, c.bits)?,
            ))
        }
    }

    pub fn scan(&self, cloud: &PointCloud) -> Result<PatchSet> {
        scan_single(cloud, self.cfg.g, self.cfg.k, self.cfg.bits)
    }

    /// Completes a batch of partial clouds (inference path).
    pub fn complete(&self, partials: &[PointCloud]) -> Result<Completion> {
        let patches: Vec<PatchSet> = partials
            .iter()
            .map(|c| self.scan(c))
            .collect::<Result<_>>()?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let (pred, feats) = self.forward_infer(&mut g, &p, &patches)?;
        let pooled_node = g.max(feats, 1)?;
        let n_out = self.cfg.n_points_out();
        let clouds = g
            .value(pred)
            .data()
            .chunks_exact(n_out * 3)
            .map(PointCloud::from_flat)
            .collect::<Result<Vec<_>>>()?;
        let pooled = g
            .value(pooled_node)
            .data()
            .chunks_exact(self.cfg.d)
            .map(<[f64]>::to_vec)
            .collect();
        Ok(Completion { clouds, pooled })
    }

    /// Paired training forward on raw clouds; returns the loss breakdown
    /// and source predictions.
    pub fn train_forward(
        &self,
        source: &[PointCloud],
        target: Option<&[PointCloud]>,
        gt: Option<&[PointCloud]>,
    ) -> Result<(Vec<PointCloud>, LossBreakdown)> {
        let gt =
            gt.ok_or_else(|| Error::Usage("training forward requires source ground truth".into()))?;
        let (src, tgt) = self.scan_batch(source, target)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let nodes = self.forward_train(&mut g, &p, &src, tgt.as_deref(), gt)?;
        let n_out = self.cfg.n_points_out();
        let clouds = g
            .value(nodes.pred)
            .data()
            .chunks_exact(n_out * 3)
            .map(PointCloud::from_flat)
            .collect::<Result<Vec<_>>>()?;
        Ok((clouds, nodes.breakdown(&g, &self.cfg)?))
    }

    /// Scans a batch; target patches are built only when training reads
    /// the target domain.
    pub fn scan_batch(
        &self,
        source: &[PointCloud],
        target: Option<&[PointCloud]>,
    ) -> Result<(Vec<PatchSet>, Option<Vec<PatchSet>>)> {
        match target.filter(|_| self.cfg.uses_target()) {
            None => Ok((
                source.iter().map(|c| self.scan(c)).collect::<Result<_>>()?,
                None,
            )),
            Some(t) => {
                if t.len() != source.len() {
                    return Err(Error::Usage(
                        "source and target batches differ in size".into(),
                    ));
                }
                let (mut a, mut b) = (Vec::new(), Vec::new());
                for (s, t) in source.iter().zip(t) {
                    let (ps, pt) = self.scan_pair(s, t)?;
                    a.push(ps);
                    b.push(pt);
                }
                Ok((a, Some(b)))
            }
        }
    }
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> Result<Option<NodeId>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(Some(if terms.len() > 1 {
        g.affine(acc, 1.0 / terms.len() as f64, 0.0)
    } else {
        acc
    }))
}

/// Row-major `rows × cols` lattice in `[−e, e]²`.
pub fn fold_seeds(rows: usize, cols: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            -FOLD_SEED_EXTENT + 2.0 * FOLD_SEED_EXTENT * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(rows * cols * 2);
    for r in 0..rows {
        for c in 0..cols {
            out.extend([coord(r, rows), coord(c, cols)]);
        }
    }
    out
}

/// `[B×M×3]` from equally sized clouds.
pub fn stack_clouds(clouds: &[PointCloud]) -> Result<Tensor> {
    let m = clouds.first().map(PointCloud::len).unwrap_or(0);
    if m == 0 || clouds.iter().any(|c| c.len() != m) {
        return Err(Error::Dimension(
            "ground-truth clouds must be nonempty and equally sized".into(),
        ));
    }
    let data = clouds.iter().flat_map(|c| c.to_flat()).collect();
    Tensor::new(vec![clouds.len(), m, 3], data)
}

/// Closed-form parameter count of a [`Model`] built from `cfg`.
pub fn analytic_param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d;
    let h = d / 2;
    let embed = (3 * h + h) + (h * d + d);
    let dims = SsmDims::standard(d, cfg.n_state);
    let (di, n, r) = (dims.d_inner, dims.d_state, dims.dt_rank);
    let w = crate::ssm::BLOCK_CONV_WIDTH;
    let block =
        2 * (d * di + di) + di * w + di + 2 * di * r + di + 2 * di * n + di * n + di + di * d + d;
    let c3 = cfg.coarse_points * 3;
    let decoder = (d * d + d) + (d * c3 + c3) + (d * d + d) + 2 * d + 3 * d + (d * 3 + 3);
    let align = AlignParams::num_params(d);
    embed + cfg.n_blocks * block + decoder + align
}

/// Multiply-adds of one inference forward on `batch` clouds.
pub fn analytic_macs(cfg: &ModelConfig, batch: usize) -> u64 {
    let d = cfg.d as u64;
    let h = d / 2;
    let b = batch as u64;
    let (g, k) = (cfg.g as u64, cfg.k as u64);
    let c = cfg.coarse_points as u64;
    let f = cfg.fold_grid.points() as u64;
    let embed = b * g * k * (3 * h + h * d);
    let dims = SsmDims::standard(cfg.d, cfg.n_state);
    let (di, n, r) = (
        dims.d_inner as u64,
        dims.d_state as u64,
        dims.dt_rank as u64,
    );
    let w = crate::ssm::BLOCK_CONV_WIDTH as u64;
    let tokens = b * g;
    // in, gate, delta down/up, B, C, out projections; conv; scan
    let block = tokens * (2 * d * di + 2 * di * r + 2 * di * n + di * d)
        + tokens * di * w
        + tokens * di * n * 3;
    let decoder = b * (d * d + d * 3 * c + d * d) + f * 2 * d + b * c * 3 * d + b * c * f * d * 3;
    embed + cfg.n_blocks as u64 * block + decoder
}
