//! The differentiable model: a conv backbone with named hook sites, a
//! support-embedding reweighting network, channel-wise feature modulation,
//! a shared per-class prediction head, and softmax score calibration.
//! A plain single-head detector sharing the same backbone serves as the
//! baseline architecture.

use crate::config::{ConfigError, ModelConfig};
use crate::geometry::{decode_branches, nms, Anchor, Detection, GeometryError, GridSpec};
use crate::nn::{
    feature_norm, feature_norm_backward, global_max_pool_backward, masked_max_pool, Conv2d,
    ConvCache, ConvGrad, FeatureNormCache,
};
use ndarray::{s, Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input: {0}")]
    BadInput(String),
    #[error("support mask has no foreground pixels")]
    EmptyMask,
    #[error("support mask is not a single filled rectangle")]
    NonRectangularMask,
    #[error("no support provided for class {class_id}")]
    MissingClass { class_id: usize },
    #[error("class {class_id} has more than one support in a training episode")]
    DuplicateSupport { class_id: usize },
    #[error("unequal shot counts across classes: {details}")]
    UnequalShots { details: String },
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("reweighting vector of length {got} cannot modulate {channels} channels")]
    ChannelMismatch { channels: usize, got: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Query-image features at a hook site, shape (m, h, w).
#[derive(Debug, Clone)]
pub struct MetaFeatureMap {
    pub values: Array3<f64>,
}

impl MetaFeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }
}

/// One (image, binary mask, class) triple fed to the reweighting network.
#[derive(Debug, Clone)]
pub struct SupportExample {
    /// (3, H, W), values in [0, 1].
    pub image: Array3<f64>,
    /// (H, W), values in {0, 1}; exactly one filled rectangle.
    pub mask: Array2<f64>,
    pub class_id: usize,
}

impl SupportExample {
    pub fn validate(&self) -> Result<(), ModelError> {
        let (c, h, w) = self.image.dim();
        if c != 3 || self.mask.dim() != (h, w) {
            return Err(ModelError::BadInput(format!(
                "support image {:?} and mask {:?} shapes disagree",
                self.image.dim(),
                self.mask.dim()
            )));
        }
        let mut y0 = usize::MAX;
        let mut y1 = 0;
        let mut x0 = usize::MAX;
        let mut x1 = 0;
        let mut ones = 0usize;
        for ((y, x), &v) in self.mask.indexed_iter() {
            if v != 0.0 && v != 1.0 {
                return Err(ModelError::BadInput("mask values must be 0 or 1".into()));
            }
            if v == 1.0 {
                ones += 1;
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
        if ones == 0 {
            return Err(ModelError::EmptyMask);
        }
        if ones != (y1 - y0 + 1) * (x1 - x0 + 1) {
            return Err(ModelError::NonRectangularMask);
        }
        Ok(())
    }
}

/// Per-class modulation coefficients.
#[derive(Debug, Clone)]
pub struct ReweightVector {
    pub values: Array1<f64>,
    pub class_id: usize,
}

/// Per-class raw branch outputs, each of shape (A*6, s, s) holding
/// (tx, ty, tw, th, to, c) per anchor. `calibrated` marks whether the class
/// channel has been softmax-normalized across branches.
#[derive(Debug, Clone)]
pub struct RawPrediction {
    pub branches: Vec<Array3<f64>>,
    pub class_ids: Vec<usize>,
    pub s: usize,
    pub n_anchors: usize,
    pub calibrated: bool,
}

impl RawPrediction {
    pub fn decode(&self, grid: &GridSpec, score_threshold: f64) -> Result<Vec<Detection>, ModelError> {
        Ok(decode_branches(&self.branches, &self.class_ids, grid, score_threshold)?)
    }
}

/// Frozen per-class average of k reweighting vectors; once built, detection
/// no longer needs the reweighting network or any support input.
#[derive(Debug, Clone)]
pub struct ClassCodebook {
    /// (class id, mean vector), sorted by class id.
    pub entries: Vec<(usize, Array1<f64>)>,
    pub k: usize,
}

impl ClassCodebook {
    pub fn class_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|(c, _)| *c).collect()
    }

    pub fn get(&self, class_id: usize) -> Option<&Array1<f64>> {
        self.entries.iter().find(|(c, _)| *c == class_id).map(|(_, v)| v)
    }
}

/// Numerically stable softmax used to calibrate per-anchor class scores.
pub fn calibrate_scores(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&c| (c - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax-normalize the class channel across branches, per (anchor, cell).
pub fn calibrate_prediction(raw: &mut RawPrediction) {
    let n = raw.branches.len();
    let mut scores = vec![0.0; n];
    for a in 0..raw.n_anchors {
        let ch = a * 6 + 5;
        for y in 0..raw.s {
            for x in 0..raw.s {
                for (i, b) in raw.branches.iter().enumerate() {
                    scores[i] = b[(ch, y, x)];
                }
                let cal = calibrate_scores(&scores);
                for (i, b) in raw.branches.iter_mut().enumerate() {
                    b[(ch, y, x)] = cal[i];
                }
            }
        }
    }
    raw.calibrated = true;
}

/// Channel-wise modulation (Eq.-style reweighting): `out[c] = f[c] * w[c]`.
/// A vector covering half the channels modulates that prefix and passes the
/// rest through unchanged; any other length mismatch is an error.
pub fn reweight(f: &MetaFeatureMap, w: &ReweightVector) -> Result<MetaFeatureMap, ModelError> {
    let channels = f.channels();
    let len = w.values.len();
    if len != channels && len * 2 != channels {
        return Err(ModelError::ChannelMismatch { channels, got: len });
    }
    Ok(MetaFeatureMap { values: modulate_prefix(&f.values, &w.values) })
}

fn modulate_prefix(f: &Array3<f64>, w: &Array1<f64>) -> Array3<f64> {
    let mut out = f.clone();
    for (c, &wc) in w.iter().enumerate() {
        out.slice_mut(s![c, .., ..]).mapv_inplace(|v| v * wc);
    }
    out
}

/// Gradient buffers for every parameter tensor of a [`FewShotDetector`].
pub struct ModelGrad {
    pub backbone: Vec<ConvGrad>,
    pub reweighter: Vec<ConvGrad>,
    pub head: ConvGrad,
}

impl ModelGrad {
    pub fn accumulate(&mut self, other: &ModelGrad) {
        for (a, b) in self.backbone.iter_mut().zip(&other.backbone) {
            a.accumulate(b);
        }
        for (a, b) in self.reweighter.iter_mut().zip(&other.reweighter) {
            a.accumulate(b);
        }
        self.head.accumulate(&other.head);
    }

    pub fn scale(&mut self, f: f64) {
        for g in self.backbone.iter_mut().chain(self.reweighter.iter_mut()) {
            g.scale(f);
        }
        self.head.scale(f);
    }

    /// Flattened in the model's canonical layer order.
    pub fn into_flat(self) -> Vec<ConvGrad> {
        let mut out = self.backbone;
        out.extend(self.reweighter);
        out.push(self.head);
        out
    }
}

pub struct SupportCache {
    caches: Vec<ConvCache>,
    argmax: Vec<(usize, usize)>,
    last_dim: (usize, usize, usize),
}

struct BranchForward {
    caches: Vec<ConvCache>,
    norm_cache: FeatureNormCache,
    head_cache: ConvCache,
}

/// Caches from a training-mode query forward pass.
pub struct QueryForward {
    pub branches: Vec<Array3<f64>>,
    backbone_caches: Vec<ConvCache>,
    branch_fwd: Vec<BranchForward>,
    hook_out: Array3<f64>,
    ws: Vec<Array1<f64>>,
}

/// The feature-reweighting few-shot detector.
pub struct FewShotDetector {
    pub backbone: Vec<Conv2d>,
    pub reweighter: Vec<Conv2d>,
    pub head: Conv2d,
    pub cfg: ModelConfig,
    pub anchors: Vec<Anchor>,
    hook_index: usize,
}

impl FewShotDetector {
    pub fn new(cfg: ModelConfig, anchors: Vec<Anchor>) -> Result<Self, ModelError> {
        cfg.validate()?;
        if anchors.is_empty() {
            return Err(ModelError::Geometry(GeometryError::EmptyAnchorList));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = build_backbone(&cfg, &mut rng);
        let mut reweighter = Vec::new();
        let mut in_ch = 7;
        for &(out_ch, stride) in &cfg.reweighter_hidden {
            reweighter.push(Conv2d::new(
                in_ch,
                out_ch,
                3,
                stride,
                Some(cfg.leaky_slope),
                cfg.reweighter_normalize,
                &mut rng,
            ));
            in_ch = out_ch;
        }
        // Final linear projection to the modulated channel count; the global
        // max pool after it has no output nonlinearity.
        reweighter.push(Conv2d::new(in_ch, cfg.modulated_channels(), 3, 1, None, false, &mut rng));

        let feat_ch = cfg.backbone.last().unwrap().0;
        let mut head = Conv2d::new(feat_ch, anchors.len() * 6, 1, 1, None, false, &mut rng);
        for a in 0..anchors.len() {
            head.bias[a * 6 + 4] = -2.0; // start objectness low
        }
        let hook_index = cfg.hook_index();
        Ok(FewShotDetector { backbone, reweighter, head, cfg, anchors, hook_index })
    }

    pub fn grid_for(&self, input_side: usize, n_classes: usize) -> Result<GridSpec, ModelError> {
        let stride = self.cfg.total_stride();
        if input_side % stride != 0 {
            return Err(ModelError::BadInput(format!(
                "input side {input_side} not divisible by backbone stride {stride}"
            )));
        }
        Ok(GridSpec::new(input_side / stride, self.anchors.clone(), n_classes.max(1))?)
    }

    pub fn layers(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.backbone.iter().collect();
        v.extend(self.reweighter.iter());
        v.push(&self.head);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v: Vec<&mut Conv2d> = self.backbone.iter_mut().collect();
        v.extend(self.reweighter.iter_mut());
        v.push(&mut self.head);
        v
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> =
            (0..self.backbone.len()).map(|i| format!("backbone.{i}")).collect();
        names.extend((0..self.reweighter.len()).map(|i| format!("reweighter.{i}")));
        names.push("head".into());
        names
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            backbone: self.backbone.iter().map(|l| l.zero_grad_like()).collect(),
            reweighter: self.reweighter.iter().map(|l| l.zero_grad_like()).collect(),
            head: self.head.zero_grad_like(),
        }
    }

    fn check_image(&self, image: &Array3<f64>) -> Result<(), ModelError> {
        let (c, h, w) = image.dim();
        let stride = self.cfg.total_stride();
        if c != 3 || h != w || h % stride != 0 {
            return Err(ModelError::BadInput(format!(
                "expected a square (3, R, R) image with R divisible by {stride}, got {:?}",
                image.dim()
            )));
        }
        Ok(())
    }

    /// Deterministic forward pass up to a named hook site.
    pub fn extract_meta_features(&self, image: &Array3<f64>, hook: &str) -> Result<MetaFeatureMap, ModelError> {
        self.check_image(image)?;
        let idx = self.cfg.hook_index_by_name(hook)?;
        let mut x = image.clone();
        for layer in &self.backbone[..=idx] {
            x = layer.forward(&x);
        }
        Ok(MetaFeatureMap { values: x })
    }

    /// Down-sample the binary mask onto a (h, w) cell grid: a cell is
    /// covered when at least a quarter of its pixels are foreground.
    fn pool_cover(&self, mask: &Array2<f64>, h: usize, w: usize) -> Option<Array2<bool>> {
        if !self.cfg.masked_pool {
            return None;
        }
        let (mh, mw) = mask.dim();
        let mut cover = Array2::from_elem((h, w), false);
        for cy in 0..h {
            for cx in 0..w {
                let y0 = cy * mh / h;
                let y1 = ((cy + 1) * mh / h).max(y0 + 1);
                let x0 = cx * mw / w;
                let x1 = ((cx + 1) * mw / w).max(x0 + 1);
                let mut on = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        if mask[(y, x)] == 1.0 {
                            on += 1;
                        }
                    }
                }
                cover[(cy, cx)] = on * 4 >= (y1 - y0) * (x1 - x0);
            }
        }
        Some(cover)
    }

    /// Embed one (image, mask) support pair into its reweighting vector.
    pub fn embed_support(&self, ex: &SupportExample) -> Result<ReweightVector, ModelError> {
        ex.validate()?;
        let mut x = stack_mask(&ex.image, &ex.mask);
        for layer in &self.reweighter {
            x = layer.forward(&x);
        }
        let cover = self.pool_cover(&ex.mask, x.dim().1, x.dim().2);
        let (values, _) = masked_max_pool(&x, cover.as_ref());
        Ok(ReweightVector { values, class_id: ex.class_id })
    }

    pub fn embed_support_train(&self, ex: &SupportExample) -> Result<(Array1<f64>, SupportCache), ModelError> {
        ex.validate()?;
        let mut x = stack_mask(&ex.image, &ex.mask);
        let mut caches = Vec::with_capacity(self.reweighter.len());
        for layer in &self.reweighter {
            let (out, cache) = layer.forward_train(&x);
            caches.push(cache);
            x = out;
        }
        let last_dim = x.dim();
        let cover = self.pool_cover(&ex.mask, last_dim.1, last_dim.2);
        let (values, argmax) = masked_max_pool(&x, cover.as_ref());
        Ok((values, SupportCache { caches, argmax, last_dim }))
    }

    pub fn backward_support(&self, cache: &SupportCache, dw: &Array1<f64>, grads: &mut ModelGrad) {
        let mut dx = global_max_pool_backward(dw, &cache.argmax, cache.last_dim);
        for (layer, lcache) in self.reweighter.iter().zip(&cache.caches).rev() {
            let idx = self
                .reweighter
                .iter()
                .zip(&cache.caches)
                .position(|(l, _)| std::ptr::eq(l, layer))
                .unwrap();
            dx = layer.backward(lcache, &dx, &mut grads.reweighter[idx]);
        }
    }

    fn branch_raw(&self, modulated: Array3<f64>) -> Array3<f64> {
        let mut x = modulated;
        for layer in &self.backbone[self.hook_index + 1..] {
            x = layer.forward(&x);
        }
        let (x, _) = feature_norm(&x);
        self.head.forward(&x)
    }

    /// Inference forward for one episode: extract, embed each support,
    /// modulate per class, predict, calibrate. Supports must cover
    /// `active_classes` exactly once each.
    pub fn forward_episode(
        &self,
        query: &Array3<f64>,
        supports: &[SupportExample],
        active_classes: &[usize],
    ) -> Result<RawPrediction, ModelError> {
        self.check_image(query)?;
        let mut by_class: BTreeMap<usize, &SupportExample> = BTreeMap::new();
        for ex in supports {
            if by_class.insert(ex.class_id, ex).is_some() {
                return Err(ModelError::DuplicateSupport { class_id: ex.class_id });
            }
        }
        let mut ws = Vec::with_capacity(active_classes.len());
        for &class_id in active_classes {
            let ex = by_class
                .get(&class_id)
                .ok_or(ModelError::MissingClass { class_id })?;
            ws.push(self.embed_support(ex)?);
        }

        let mut x = query.clone();
        let mut hook_out = None;
        for (i, layer) in self.backbone.iter().enumerate() {
            x = layer.forward(&x);
            if i == self.hook_index {
                hook_out = Some(x.clone());
            }
        }
        let hook_out = hook_out.expect("hook index in range");

        let branches: Vec<Array3<f64>> = ws
            .iter()
            .map(|w| self.branch_raw(modulate_prefix(&hook_out, &w.values)))
            .collect();
        let s = branches[0].dim().1;
        let mut raw = RawPrediction {
            branches,
            class_ids: active_classes.to_vec(),
            s,
            n_anchors: self.anchors.len(),
            calibrated: false,
        };
        calibrate_prediction(&mut raw);
        Ok(raw)
    }

    /// Training forward for one query against precomputed reweighting
    /// vectors (one per branch). Returns raw, uncalibrated branch logits
    /// plus the caches backward needs.
    pub fn forward_query_train(&self, query: &Array3<f64>, ws: &[Array1<f64>]) -> Result<QueryForward, ModelError> {
        self.check_image(query)?;
        let mut x = query.clone();
        let mut backbone_caches = Vec::with_capacity(self.hook_index + 1);
        for layer in &self.backbone[..=self.hook_index] {
            let (out, cache) = layer.forward_train(&x);
            backbone_caches.push(cache);
            x = out;
        }
        let hook_out = x;

        let mut branches = Vec::with_capacity(ws.len());
        let mut branch_fwd = Vec::with_capacity(ws.len());
        for w in ws {
            let mut bx = modulate_prefix(&hook_out, w);
            let mut caches = Vec::new();
            for layer in &self.backbone[self.hook_index + 1..] {
                let (out, cache) = layer.forward_train(&bx);
                caches.push(cache);
                bx = out;
            }
            let (normed, norm_cache) = feature_norm(&bx);
            let (raw, head_cache) = self.head.forward_train(&normed);
            branches.push(raw);
            branch_fwd.push(BranchForward { caches, norm_cache, head_cache });
        }
        Ok(QueryForward {
            branches,
            backbone_caches,
            branch_fwd,
            hook_out,
            ws: ws.to_vec(),
        })
    }

    /// Backward from per-branch raw-output gradients. Accumulates parameter
    /// gradients and returns the gradient for each reweighting vector.
    pub fn backward_query(
        &self,
        fwd: &QueryForward,
        dbranches: &[Array3<f64>],
        grads: &mut ModelGrad,
    ) -> Vec<Array1<f64>> {
        let hook_dim = fwd.hook_out.dim();
        let mut dhook = Array3::<f64>::zeros(hook_dim);
        let mut dws = Vec::with_capacity(fwd.ws.len());
        let post_hook_offset = self.hook_index + 1;

        for ((w, bf), dout) in fwd.ws.iter().zip(&fwd.branch_fwd).zip(dbranches) {
            let dx = self.head.backward(&bf.head_cache, dout, &mut grads.head);
            let mut dx = feature_norm_backward(&bf.norm_cache, &dx);
            for (rev_i, layer) in self.backbone[post_hook_offset..].iter().enumerate().rev() {
                dx = layer.backward(&bf.caches[rev_i], &dx, &mut grads.backbone[post_hook_offset + rev_i]);
            }
            // dx now holds the gradient at the modulated map: split it into
            // the shared-feature path and the reweighting-vector path.
            let mut dw = Array1::<f64>::zeros(w.len());
            for c in 0..hook_dim.0 {
                if c < w.len() {
                    let scale = w[c];
                    let mut acc = 0.0;
                    ndarray::Zip::from(dhook.slice_mut(s![c, .., ..]))
                        .and(dx.slice(s![c, .., ..]))
                        .and(fwd.hook_out.slice(s![c, .., ..]))
                        .for_each(|dh, &d, &f| {
                            *dh += d * scale;
                            acc += d * f;
                        });
                    dw[c] = acc;
                } else {
                    // pass-through channels (late-half)
                    let mut dst = dhook.slice_mut(s![c, .., ..]);
                    dst += &dx.slice(s![c, .., ..]);
                }
            }
            dws.push(dw);
        }

        let mut dx = dhook;
        for (i, layer) in self.backbone[..=self.hook_index].iter().enumerate().rev() {
            dx = layer.backward(&fwd.backbone_caches[i], &dx, &mut grads.backbone[i]);
        }
        dws
    }

    /// Average k per-shot embeddings per class into a frozen codebook.
    pub fn build_codebook(&self, shots: &[SupportExample]) -> Result<ClassCodebook, ModelError> {
        let mut by_class: BTreeMap<usize, Vec<Array1<f64>>> = BTreeMap::new();
        for ex in shots {
            let w = self.embed_support(ex)?;
            by_class.entry(ex.class_id).or_default().push(w.values);
        }
        if by_class.is_empty() {
            return Err(ModelError::EmptyCodebook);
        }
        let counts: Vec<usize> = by_class.values().map(|v| v.len()).collect();
        let k = counts[0];
        if counts.iter().any(|&c| c != k) {
            let details = by_class
                .iter()
                .map(|(c, v)| format!("class {c}: {}", v.len()))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(ModelError::UnequalShots { details });
        }
        let entries = by_class
            .into_iter()
            .map(|(class_id, vs)| {
                let mut mean = Array1::<f64>::zeros(vs[0].len());
                for v in &vs {
                    mean += v;
                }
                mean /= k as f64;
                (class_id, mean)
            })
            .collect();
        Ok(ClassCodebook { entries, k })
    }

    /// Detect with a frozen codebook: extract, modulate per codebook entry,
    /// predict, calibrate, decode and per-class NMS.
    pub fn detect(
        &self,
        image: &Array3<f64>,
        codebook: &ClassCodebook,
        score_threshold: f64,
        nms_threshold: f64,
    ) -> Result<Vec<Detection>, ModelError> {
        if codebook.entries.is_empty() {
            return Err(ModelError::EmptyCodebook);
        }
        self.check_image(image)?;
        let mut x = image.clone();
        let mut hook_out = None;
        for (i, layer) in self.backbone.iter().enumerate() {
            x = layer.forward(&x);
            if i == self.hook_index {
                hook_out = Some(x.clone());
            }
        }
        let hook_out = hook_out.expect("hook index in range");
        let branches: Vec<Array3<f64>> = codebook
            .entries
            .iter()
            .map(|(_, w)| self.branch_raw(modulate_prefix(&hook_out, w)))
            .collect();
        let class_ids = codebook.class_ids();
        let s_dim = branches[0].dim().1;
        let mut raw = RawPrediction {
            branches,
            class_ids: class_ids.clone(),
            s: s_dim,
            n_anchors: self.anchors.len(),
            calibrated: false,
        };
        calibrate_prediction(&mut raw);
        let grid = GridSpec::new(s_dim, self.anchors.clone(), class_ids.len())?;
        let dets = raw.decode(&grid, score_threshold)?;
        let mut kept = nms(&dets, nms_threshold);
        kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        Ok(kept)
    }
}

fn build_backbone(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Conv2d> {
    let mut layers = Vec::with_capacity(cfg.backbone.len());
    let mut in_ch = 3;
    for &(out_ch, stride) in &cfg.backbone {
        layers.push(Conv2d::new(in_ch, out_ch, 3, stride, Some(cfg.leaky_slope), cfg.normalize, rng));
        in_ch = out_ch;
    }
    layers
}

/// Reweighter input: RGB, the binary mask, and the mask-gated RGB planes.
/// The gated planes zero everything outside the indicated object, so support
/// inputs of different classes differ strongly from the first layer on.
fn stack_mask(image: &Array3<f64>, mask: &Array2<f64>) -> Array3<f64> {
    let (_, h, w) = image.dim();
    let mut x = Array3::<f64>::zeros((7, h, w));
    x.slice_mut(s![..3, .., ..]).assign(image);
    x.slice_mut(s![3, .., ..]).assign(mask);
    for c in 0..3 {
        ndarray::Zip::from(x.slice_mut(s![4 + c, .., ..]).view_mut())
            .and(image.slice(s![c, .., ..]))
            .and(mask)
            .for_each(|o, &v, &m| *o = v * m);
    }
    x
}

/// Gradient buffers for a [`PlainDetector`].
pub struct PlainGrad {
    pub backbone: Vec<ConvGrad>,
    pub head: ConvGrad,
}

impl PlainGrad {
    pub fn accumulate(&mut self, other: &PlainGrad) {
        for (a, b) in self.backbone.iter_mut().zip(&other.backbone) {
            a.accumulate(b);
        }
        self.head.accumulate(&other.head);
    }

    pub fn scale(&mut self, f: f64) {
        for g in self.backbone.iter_mut() {
            g.scale(f);
        }
        self.head.scale(f);
    }

    pub fn into_flat(self) -> Vec<ConvGrad> {
        let mut out = self.backbone;
        out.push(self.head);
        out
    }
}

pub struct PlainForward {
    pub raw: Array3<f64>,
    caches: Vec<ConvCache>,
    norm_cache: FeatureNormCache,
    head_cache: ConvCache,
}

/// The baseline detector: same backbone, one head emitting shared geometry
/// plus an N-way class score block per anchor, softmax over classes.
pub struct PlainDetector {
    pub backbone: Vec<Conv2d>,
    pub head: Conv2d,
    pub cfg: ModelConfig,
    pub anchors: Vec<Anchor>,
    pub n_classes: usize,
}

impl PlainDetector {
    pub fn new(cfg: ModelConfig, anchors: Vec<Anchor>, n_classes: usize) -> Result<Self, ModelError> {
        cfg.validate()?;
        if anchors.is_empty() {
            return Err(ModelError::Geometry(GeometryError::EmptyAnchorList));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = build_backbone(&cfg, &mut rng);
        let feat_ch = cfg.backbone.last().unwrap().0;
        let per_anchor = 5 + n_classes;
        let mut head = Conv2d::new(feat_ch, anchors.len() * per_anchor, 1, 1, None, false, &mut rng);
        for a in 0..anchors.len() {
            head.bias[a * per_anchor + 4] = -2.0;
        }
        Ok(PlainDetector { backbone, head, cfg, anchors, n_classes })
    }

    pub fn layers(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.backbone.iter().collect();
        v.push(&self.head);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v: Vec<&mut Conv2d> = self.backbone.iter_mut().collect();
        v.push(&mut self.head);
        v
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> =
            (0..self.backbone.len()).map(|i| format!("backbone.{i}")).collect();
        names.push("head".into());
        names
    }

    pub fn zero_grad(&self) -> PlainGrad {
        PlainGrad {
            backbone: self.backbone.iter().map(|l| l.zero_grad_like()).collect(),
            head: self.head.zero_grad_like(),
        }
    }

    pub fn forward(&self, image: &Array3<f64>) -> Array3<f64> {
        let mut x = image.clone();
        for layer in &self.backbone {
            x = layer.forward(&x);
        }
        let (x, _) = feature_norm(&x);
        self.head.forward(&x)
    }

    pub fn forward_train(&self, image: &Array3<f64>) -> PlainForward {
        let mut x = image.clone();
        let mut caches = Vec::with_capacity(self.backbone.len());
        for layer in &self.backbone {
            let (out, cache) = layer.forward_train(&x);
            caches.push(cache);
            x = out;
        }
        let (normed, norm_cache) = feature_norm(&x);
        let (raw, head_cache) = self.head.forward_train(&normed);
        PlainForward { raw, caches, norm_cache, head_cache }
    }

    pub fn backward(&self, fwd: &PlainForward, draw: &Array3<f64>, grads: &mut PlainGrad) {
        let dx = self.head.backward(&fwd.head_cache, draw, &mut grads.head);
        let mut dx = feature_norm_backward(&fwd.norm_cache, &dx);
        for (i, layer) in self.backbone.iter().enumerate().rev() {
            dx = layer.backward(&fwd.caches[i], &dx, &mut grads.backbone[i]);
        }
    }

    /// View the single shared-geometry output as per-class branches, copying
    /// the geometry block into every branch and routing each class score to
    /// its own branch's class channel.
    pub fn to_branches(&self, raw: &Array3<f64>) -> Vec<Array3<f64>> {
        let (_, s, _) = raw.dim();
        let a_n = self.anchors.len();
        let per_anchor = 5 + self.n_classes;
        let mut branches = vec![Array3::<f64>::zeros((a_n * 6, s, s)); self.n_classes];
        for (ci, branch) in branches.iter_mut().enumerate() {
            for a in 0..a_n {
                for j in 0..5 {
                    branch
                        .slice_mut(s![a * 6 + j, .., ..])
                        .assign(&raw.slice(s![a * per_anchor + j, .., ..]));
                }
                branch
                    .slice_mut(s![a * 6 + 5, .., ..])
                    .assign(&raw.slice(s![a * per_anchor + 5 + ci, .., ..]));
            }
        }
        branches
    }

    /// Fold per-branch gradients back onto the shared output layout:
    /// geometry gradients sum across branches, class-score gradients route
    /// to their own channel.
    pub fn branch_grads_to_raw(&self, dbranches: &[Array3<f64>], s_dim: usize) -> Array3<f64> {
        let a_n = self.anchors.len();
        let per_anchor = 5 + self.n_classes;
        let mut draw = Array3::<f64>::zeros((a_n * per_anchor, s_dim, s_dim));
        for (ci, db) in dbranches.iter().enumerate() {
            for a in 0..a_n {
                for j in 0..5 {
                    let mut dst = draw.slice_mut(s![a * per_anchor + j, .., ..]);
                    dst += &db.slice(s![a * 6 + j, .., ..]);
                }
                let mut dst = draw.slice_mut(s![a * per_anchor + 5 + ci, .., ..]);
                dst += &db.slice(s![a * 6 + 5, .., ..]);
            }
        }
        draw
    }

    pub fn detect(
        &self,
        image: &Array3<f64>,
        class_ids: &[usize],
        score_threshold: f64,
        nms_threshold: f64,
    ) -> Result<Vec<Detection>, ModelError> {
        let raw = self.forward(image);
        let branches = self.to_branches(&raw);
        let s_dim = raw.dim().1;
        let mut pred = RawPrediction {
            branches,
            class_ids: (0..self.n_classes).collect(),
            s: s_dim,
            n_anchors: self.anchors.len(),
            calibrated: false,
        };
        calibrate_prediction(&mut pred);
        // keep only the requested classes
        let keep: Vec<usize> = pred
            .class_ids
            .iter()
            .enumerate()
            .filter(|(_, c)| class_ids.contains(c))
            .map(|(i, _)| i)
            .collect();
        let branches: Vec<Array3<f64>> = keep.iter().map(|&i| pred.branches[i].clone()).collect();
        let ids: Vec<usize> = keep.iter().map(|&i| pred.class_ids[i]).collect();
        let grid = GridSpec::new(s_dim, self.anchors.clone(), self.n_classes)?;
        let dets = decode_branches(&branches, &ids, &grid, score_threshold)?;
        let mut kept = nms(&dets, nms_threshold);
        kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        Ok(kept)
    }
}
