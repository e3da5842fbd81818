use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    conv_backward, conv_forward, group_norm_backward, group_norm_forward, linear_backward,
    linear_forward, relu_backward_inplace, relu_inplace, se_backward, se_forward, softmax,
    ConvCache, ConvGeom, GroupNormCache, SeCache, SeGrads, SeParams, Upsampler,
};
use super::tensor::{ParameterSet, Scalar, Tensor};
use crate::clip::VideoClip;
use crate::error::{Error, Result};

/// Reduced squeeze-and-excitation backbone with dilated late stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    /// Equals the clip length K for clip inputs.
    pub input_channels: usize,
    pub widths: Vec<usize>,
    pub dilations: Vec<usize>,
    pub strides: Vec<usize>,
    pub se_ratio: usize,
    /// Side of the square input.
    pub input_size: usize,
    /// Upper bound on group-norm groups; each stage uses `gcd(width, norm_groups)`.
    pub norm_groups: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            input_channels: 4,
            widths: vec![16, 32, 64, 64],
            dilations: vec![1, 1, 2, 4],
            strides: vec![2, 2, 1, 1],
            se_ratio: 4,
            input_size: 64,
            norm_groups: 4,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n < 2 {
            return Err(Error::invalid(format!("backbone needs at least 2 stages, got {n}")));
        }
        if self.dilations.len() != n || self.strides.len() != n {
            return Err(Error::invalid(format!(
                "backbone lists disagree: {} widths, {} dilations, {} strides",
                n,
                self.dilations.len(),
                self.strides.len()
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::invalid("input channels must be at least 1"));
        }
        if self.se_ratio == 0 {
            return Err(Error::invalid("SE ratio must be at least 1"));
        }
        if self.norm_groups == 0 {
            return Err(Error::invalid("norm groups must be at least 1"));
        }
        for (i, &w) in self.widths.iter().enumerate() {
            if w == 0 || w % self.se_ratio != 0 {
                return Err(Error::invalid(format!(
                    "stage {i} width {w} is not a positive multiple of SE ratio {}",
                    self.se_ratio
                )));
            }
        }
        if let Some(i) = self.dilations.iter().position(|&d| d == 0) {
            return Err(Error::invalid(format!("stage {i} dilation must be at least 1")));
        }
        if let Some(i) = self.strides.iter().position(|&s| s == 0) {
            return Err(Error::invalid(format!("stage {i} stride must be at least 1")));
        }
        if self.input_size == 0 {
            return Err(Error::invalid("input size must be at least 1"));
        }
        Ok(())
    }

    /// Spatial side of the final feature map.
    pub fn feature_size(&self) -> usize {
        self.stage_geoms().last().map(|g| g.out_h()).unwrap_or(self.input_size)
    }

    /// Length of the pooled feature vector.
    pub fn feature_len(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn se_hidden(&self, stage: usize) -> usize {
        self.widths[stage] / self.se_ratio
    }

    fn stage_geoms(&self) -> Vec<ConvGeom> {
        let mut cin = self.input_channels;
        let mut side = self.input_size;
        let mut out = Vec::with_capacity(self.widths.len());
        for i in 0..self.widths.len() {
            let g = ConvGeom::new(cin, self.widths[i], 3, self.strides[i], self.dilations[i], side, side);
            side = g.out_h();
            cin = self.widths[i];
            out.push(g);
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON encoding; identifies compatible trunks.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("backbone spec serializes");
        hex(&Sha256::digest(bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Head wiring of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkVariant {
    /// Shared trunk over shuffled, original and transformed clips.
    Siamese,
    /// One trunk pass over the shuffled-and-warped clip feeding both heads.
    Disentangle,
    OrderOnly,
    TransformOnly,
    Planes { classes: usize },
    Saliency,
}

impl NetworkVariant {
    pub fn is_pretext(&self) -> bool {
        matches!(
            self,
            Self::Siamese | Self::Disentangle | Self::OrderOnly | Self::TransformOnly
        )
    }

    pub fn has_order_head(&self) -> bool {
        matches!(self, Self::Siamese | Self::Disentangle | Self::OrderOnly)
    }

    pub fn has_transform_head(&self) -> bool {
        matches!(self, Self::Siamese | Self::Disentangle | Self::TransformOnly)
    }

    /// Command-line spelling of the pretext variants.
    pub const PRETEXT_NAMES: [&'static str; 4] = ["siamese", "disentangle", "order-only", "transform-only"];
}

impl fmt::Display for NetworkVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Siamese => f.write_str("siamese"),
            Self::Disentangle => f.write_str("disentangle"),
            Self::OrderOnly => f.write_str("order-only"),
            Self::TransformOnly => f.write_str("transform-only"),
            Self::Planes { classes } => write!(f, "planes:{classes}"),
            Self::Saliency => f.write_str("saliency"),
        }
    }
}

impl FromStr for NetworkVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "siamese" => Ok(Self::Siamese),
            "disentangle" => Ok(Self::Disentangle),
            "order-only" | "order_only" => Ok(Self::OrderOnly),
            "transform-only" | "transform_only" => Ok(Self::TransformOnly),
            "saliency" => Ok(Self::Saliency),
            other => {
                if let Some(n) = other.strip_prefix("planes:") {
                    if let Ok(classes) = n.parse() {
                        return Ok(Self::Planes { classes });
                    }
                }
                Err(Error::invalid(format!(
                    "unknown variant '{other}'; expected one of {}",
                    Self::PRETEXT_NAMES.join("|")
                )))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub backbone: BackboneSpec,
    pub variant: NetworkVariant,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let k = self.backbone.input_channels;
        match self.variant {
            v if v.has_order_head() && !(2..=8).contains(&k) => Err(Error::invalid(format!(
                "order head needs 2..=8 input frames, backbone has {k} channels"
            ))),
            NetworkVariant::Planes { classes } if classes < 2 => {
                Err(Error::invalid(format!("plane head needs at least 2 classes, got {classes}")))
            }
            _ => Ok(()),
        }
    }

    /// `K!/2` order classes for the backbone's clip length.
    pub fn order_classes(&self) -> usize {
        (1..=self.backbone.input_channels).product::<usize>() / 2
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    HeUniform(usize),
    Xavier(usize, usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct StageLayout {
    conv1: usize,
    norm1: (usize, usize),
    conv2: usize,
    norm2: (usize, usize),
    se: [usize; 4],
    shortcut: Option<(usize, usize)>,
    g1: ConvGeom,
    g2: ConvGeom,
    gs: Option<ConvGeom>,
    groups: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct HeadLayout {
    order: Option<(usize, usize)>,
    transform: Option<(usize, usize)>,
    plane: Option<(usize, usize)>,
    saliency: Option<usize>,
}

/// Backbone plus task heads, generic over the element type.
#[derive(Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    params: ParameterSet<T>,
    stages: Vec<StageLayout>,
    heads: HeadLayout,
    upsampler: Option<Arc<Upsampler>>,
}

impl<T: Scalar> fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("parameters", &self.params.num_values())
            .finish()
    }
}

/// Views of one clip consumed by the pretext wirings. Each variant reads
/// only the views it needs.
#[derive(Debug, Clone, Copy)]
pub struct PretextViews<'a> {
    pub shuffled: &'a VideoClip,
    pub original: &'a VideoClip,
    pub transformed: &'a VideoClip,
    pub corrupted: &'a VideoClip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretextOutput<T> {
    pub order_logits: Option<Vec<T>>,
    /// tanh-bounded normalized transform estimate.
    pub tau_hat: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DownstreamOutput<T> {
    Plane { logits: Vec<T> },
    /// `logits` are the pre-softmax scores of `map`, both at input resolution.
    Saliency { logits: Vec<T>, map: Vec<T> },
}

struct StageCache<T> {
    c1: ConvCache<T>,
    n1: GroupNormCache<T>,
    a1: Vec<T>,
    c2: ConvCache<T>,
    n2: GroupNormCache<T>,
    se: SeCache<T>,
    shortcut: Option<ConvCache<T>>,
    y: Vec<T>,
}

struct TrunkPass<T> {
    stages: Vec<StageCache<T>>,
    pooled: Vec<T>,
}

/// Intermediate values kept by a forward pass for the matching backward.
pub struct PretextCache<T> {
    branches: Vec<TrunkPass<T>>,
    tau_hat: Option<Vec<T>>,
}

pub struct DownstreamCache<T> {
    pass: TrunkPass<T>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with deterministic initialization from `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let b = &spec.backbone;
        let mut inits: Vec<Init> = Vec::new();
        let mut params = ParameterSet::new();
        let mut add = |params: &mut ParameterSet<T>, name: String, shape: &[usize], init: Init| {
            inits.push(init);
            params.push(name, Tensor::zeros(shape))
        };
        let mut stages = Vec::new();
        for (i, g1) in b.stage_geoms().into_iter().enumerate() {
            let (cin, cout) = (g1.cin, g1.cout);
            let p = format!("trunk.stage{i}");
            let conv1 = add(&mut params, format!("{p}.conv1.weight"), &[cout, cin, 3, 3], Init::HeUniform(cin * 9));
            let n1g = add(&mut params, format!("{p}.norm1.gamma"), &[cout], Init::Ones);
            let n1b = add(&mut params, format!("{p}.norm1.beta"), &[cout], Init::Zeros);
            let conv2 = add(&mut params, format!("{p}.conv2.weight"), &[cout, cout, 3, 3], Init::HeUniform(cout * 9));
            let n2g = add(&mut params, format!("{p}.norm2.gamma"), &[cout], Init::Ones);
            let n2b = add(&mut params, format!("{p}.norm2.beta"), &[cout], Init::Zeros);
            let hidden = b.se_hidden(i);
            let se = [
                add(&mut params, format!("{p}.se.fc1.weight"), &[hidden, cout], Init::HeUniform(cout)),
                add(&mut params, format!("{p}.se.fc1.bias"), &[hidden], Init::Zeros),
                add(&mut params, format!("{p}.se.fc2.weight"), &[cout, hidden], Init::Xavier(hidden, cout)),
                add(&mut params, format!("{p}.se.fc2.bias"), &[cout], Init::Zeros),
            ];
            let needs_projection = cin != cout || g1.stride != 1;
            let (shortcut, gs) = if needs_projection {
                let w = add(&mut params, format!("{p}.shortcut.weight"), &[cout, cin, 1, 1], Init::HeUniform(cin));
                let bias = add(&mut params, format!("{p}.shortcut.bias"), &[cout], Init::Zeros);
                (Some((w, bias)), Some(ConvGeom::new(cin, cout, 1, g1.stride, 1, g1.h, g1.w)))
            } else {
                (None, None)
            };
            let g2 = ConvGeom::new(cout, cout, 3, 1, g1.dilation, g1.out_h(), g1.out_w());
            stages.push(StageLayout {
                conv1,
                norm1: (n1g, n1b),
                conv2,
                norm2: (n2g, n2b),
                se,
                shortcut,
                g1,
                g2,
                gs,
                groups: gcd(cout, b.norm_groups),
            });
        }
        let f = b.feature_len();
        let mut heads = HeadLayout::default();
        let mut linear_head = |params: &mut ParameterSet<T>, name: &str, fan_in: usize, fan_out: usize| {
            let w = add(params, format!("head.{name}.weight"), &[fan_out, fan_in], Init::Xavier(fan_in, fan_out));
            let bias = add(params, format!("head.{name}.bias"), &[fan_out], Init::Zeros);
            (w, bias)
        };
        let v = spec.variant;
        if v.has_order_head() {
            heads.order = Some(linear_head(&mut params, "order", f, spec.order_classes()));
        }
        if v.has_transform_head() {
            let fan_in = if v == NetworkVariant::Disentangle { f } else { 2 * f };
            heads.transform = Some(linear_head(&mut params, "transform", fan_in, 6));
        }
        let mut upsampler = None;
        match v {
            NetworkVariant::Planes { classes } => {
                heads.plane = Some(linear_head(&mut params, "plane", f, classes));
            }
            NetworkVariant::Saliency => {
                // No bias: a constant shift cancels in the spatial softmax.
                heads.saliency = Some(add(&mut params, "head.saliency.weight".into(), &[1, f, 1, 1], Init::Xavier(f, 1)));
                let s = b.feature_size();
                upsampler = Some(Arc::new(Upsampler::new(s, s, b.input_size, b.input_size)));
            }
            _ => {}
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (slot, init) in inits.into_iter().enumerate() {
            let data = params.data_mut(slot);
            match init {
                Init::Zeros => {}
                Init::Ones => data.iter_mut().for_each(|v| *v = T::one()),
                Init::HeUniform(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    data.iter_mut().for_each(|v| *v = T::of(rng.gen_range(-bound..bound)));
                }
                Init::Xavier(fan_in, fan_out) => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    data.iter_mut().for_each(|v| *v = T::of(rng.gen_range(-bound..bound)));
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            params,
            stages,
            heads,
            upsampler,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn variant(&self) -> NetworkVariant {
        self.spec.variant
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    /// Replaces all parameters; names and shapes must match.
    pub fn set_params(&mut self, params: ParameterSet<T>) -> Result<()> {
        if params.names() != self.params.names() {
            return Err(Error::invalid("parameter names differ from the network layout"));
        }
        for ((name, a), (_, b)) in params.iter().zip(self.params.iter()) {
            if a.shape != b.shape {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    a.shape, b.shape
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Sets every head tensor to zero.
    pub fn zero_heads(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with("head.") {
                t.data.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            stages: self.stages.clone(),
            heads: self.heads,
            upsampler: self.upsampler.clone(),
        }
    }

    fn input(&self, clip: &VideoClip) -> Result<Vec<T>> {
        let b = &self.spec.backbone;
        if clip.k() != b.input_channels || clip.height() != b.input_size || clip.width() != b.input_size {
            return Err(Error::invalid(format!(
                "clip is {}x{}x{}, network expects {}x{}x{}",
                clip.k(),
                clip.height(),
                clip.width(),
                b.input_channels,
                b.input_size,
                b.input_size
            )));
        }
        Ok(clip.pixels().iter().map(|&v| T::of(v as f64)).collect())
    }

    fn stage_forward(&self, st: &StageLayout, x: &[T]) -> (Vec<T>, StageCache<T>) {
        let p = &self.params;
        let cout = st.g1.cout;
        let hw = st.g1.out_h() * st.g1.out_w();
        let (c1, cc1) = conv_forward(x, p.data(st.conv1), None, &st.g1);
        let (mut a1, n1) = group_norm_forward(&c1, cout, hw, st.groups, p.data(st.norm1.0), p.data(st.norm1.1));
        relu_inplace(&mut a1);
        let (c2, cc2) = conv_forward(&a1, p.data(st.conv2), None, &st.g2);
        let (z2, n2) = group_norm_forward(&c2, cout, hw, st.groups, p.data(st.norm2.0), p.data(st.norm2.1));
        let (mut y, se) = se_forward(&z2, cout, hw, &self.se_params(st));
        let shortcut = match (st.shortcut, &st.gs) {
            (Some((w, b)), Some(gs)) => {
                let (s, cache) = conv_forward(x, p.data(w), Some(p.data(b)), gs);
                y.iter_mut().zip(&s).for_each(|(a, &b)| *a += b);
                Some(cache)
            }
            _ => {
                y.iter_mut().zip(x).for_each(|(a, &b)| *a += b);
                None
            }
        };
        relu_inplace(&mut y);
        let cache = StageCache {
            c1: cc1,
            n1,
            a1,
            c2: cc2,
            n2,
            se,
            shortcut,
            y: y.clone(),
        };
        (y, cache)
    }

    fn se_params(&self, st: &StageLayout) -> SeParams<'_, T> {
        let p = &self.params;
        SeParams {
            w1: p.data(st.se[0]),
            b1: p.data(st.se[1]),
            w2: p.data(st.se[2]),
            b2: p.data(st.se[3]),
        }
    }

    fn stage_backward(
        &self,
        st: &StageLayout,
        cache: &StageCache<T>,
        mut dy: Vec<T>,
        grads: &mut ParameterSet<T>,
        need_input: bool,
    ) -> Option<Vec<T>> {
        let p = &self.params;
        let cout = st.g1.cout;
        let hw = st.g1.out_h() * st.g1.out_w();
        relu_backward_inplace(&mut dy, &cache.y);
        let [w1, b1, w2, b2] = grads.data_mut_many(st.se);
        let dz2 = se_backward(&dy, hw, &self.se_params(st), &cache.se, SeGrads { w1, b1, w2, b2 });
        let [dg, db] = grads.data_mut_many([st.norm2.0, st.norm2.1]);
        let dc2 = group_norm_backward(&dz2, cout, hw, st.groups, p.data(st.norm2.0), &cache.n2, dg, db);
        let mut da1 = conv_backward(&dc2, p.data(st.conv2), &cache.c2, &st.g2, grads.data_mut(st.conv2), None, true)
            .expect("input gradient requested");
        relu_backward_inplace(&mut da1, &cache.a1);
        let [dg, db] = grads.data_mut_many([st.norm1.0, st.norm1.1]);
        let dc1 = group_norm_backward(&da1, cout, hw, st.groups, p.data(st.norm1.0), &cache.n1, dg, db);
        let dx_main = conv_backward(&dc1, p.data(st.conv1), &cache.c1, &st.g1, grads.data_mut(st.conv1), None, need_input);
        let dx_short = match (st.shortcut, &st.gs, &cache.shortcut) {
            (Some((w, b)), Some(gs), Some(sc)) => {
                let [dw, dbias] = grads.data_mut_many([w, b]);
                conv_backward(&dy, p.data(w), sc, gs, dw, Some(dbias), need_input)
            }
            _ => need_input.then_some(dy),
        };
        match (dx_main, dx_short) {
            (Some(mut a), Some(b)) => {
                a.iter_mut().zip(&b).for_each(|(x, &y)| *x += y);
                Some(a)
            }
            _ => None,
        }
    }

    fn trunk_forward(&self, x: Vec<T>) -> (Vec<T>, TrunkPass<T>) {
        let mut h = x;
        let mut caches = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let (y, c) = self.stage_forward(st, &h);
            caches.push(c);
            h = y;
        }
        let hw = self.feature_hw();
        let pooled = h.chunks(hw).map(|c| c.iter().copied().sum::<T>() / T::of(hw as f64)).collect();
        (
            h,
            TrunkPass {
                stages: caches,
                pooled,
            },
        )
    }

    /// Backpropagates a gradient on the final feature map through the trunk.
    fn trunk_backward(&self, pass: &TrunkPass<T>, dmap: Vec<T>, grads: &mut ParameterSet<T>) {
        let mut d = dmap;
        for (i, (st, cache)) in self.stages.iter().zip(&pass.stages).enumerate().rev() {
            match self.stage_backward(st, cache, d, grads, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    fn pooled_grad(&self, dpooled: &[T]) -> Vec<T> {
        let hw = self.feature_hw();
        let scale = T::one() / T::of(hw as f64);
        dpooled.iter().flat_map(|&d| std::iter::repeat(d * scale).take(hw)).collect()
    }

    fn feature_hw(&self) -> usize {
        let g = &self.stages.last().expect("at least two stages").g1;
        g.out_h() * g.out_w()
    }

    fn head(&self, slots: Option<(usize, usize)>, x: &[T]) -> Vec<T> {
        let (w, b) = slots.expect("head present for variant");
        linear_forward(x, self.params.data(w), self.params.data(b))
    }

    fn head_backward(&self, slots: Option<(usize, usize)>, dy: &[T], x: &[T], grads: &mut ParameterSet<T>) -> Vec<T> {
        let (w, b) = slots.expect("head present for variant");
        let [dw, db] = grads.data_mut_many([w, b]);
        linear_backward(dy, x, self.params.data(w), dw, db)
    }

    fn check_pretext(&self) -> Result<()> {
        if !self.spec.variant.is_pretext() {
            return Err(Error::invalid(format!(
                "{} network has no pretext heads",
                self.spec.variant
            )));
        }
        Ok(())
    }

    /// Runs the variant's pretext wiring and keeps what backward needs.
    pub fn pretext_forward(&self, views: &PretextViews<'_>) -> Result<(PretextOutput<T>, PretextCache<T>)> {
        self.check_pretext()?;
        let inputs: Vec<&VideoClip> = match self.spec.variant {
            NetworkVariant::Siamese => vec![views.shuffled, views.original, views.transformed],
            NetworkVariant::OrderOnly => vec![views.shuffled],
            NetworkVariant::TransformOnly => vec![views.original, views.transformed],
            _ => vec![views.corrupted],
        };
        let branches: Vec<TrunkPass<T>> = inputs
            .into_iter()
            .map(|clip| Ok(self.trunk_forward(self.input(clip)?).1))
            .collect::<Result<_>>()?;
        let order_logits = self
            .heads
            .order
            .is_some()
            .then(|| self.head(self.heads.order, &branches[0].pooled));
        let tau_hat = self.heads.transform.map(|_| {
            let z = self.head(self.heads.transform, &self.transform_input(&branches));
            z.into_iter().map(T::tanh).collect::<Vec<_>>()
        });
        Ok((
            PretextOutput {
                order_logits,
                tau_hat: tau_hat.clone(),
            },
            PretextCache { branches, tau_hat },
        ))
    }

    fn transform_input(&self, branches: &[TrunkPass<T>]) -> Vec<T> {
        match self.spec.variant {
            NetworkVariant::Disentangle => branches[0].pooled.clone(),
            NetworkVariant::Siamese => [branches[1].pooled.as_slice(), &branches[2].pooled].concat(),
            _ => [branches[0].pooled.as_slice(), &branches[1].pooled].concat(),
        }
    }

    /// Accumulates parameter gradients given `d_order` (gradient on the order
    /// logits) and `d_tau` (gradient on the tanh-bounded transform output).
    pub fn pretext_backward(
        &self,
        cache: &PretextCache<T>,
        d_order: Option<&[T]>,
        d_tau: Option<&[T]>,
        grads: &mut ParameterSet<T>,
    ) {
        let f = self.spec.backbone.feature_len();
        let mut dpooled: Vec<Vec<T>> = cache.branches.iter().map(|_| vec![T::zero(); f]).collect();
        if let (Some(d), Some(_)) = (d_order, self.heads.order) {
            let dx = self.head_backward(self.heads.order, d, &cache.branches[0].pooled, grads);
            add_into(&mut dpooled[0], &dx);
        }
        if let (Some(d), Some(tau)) = (d_tau, &cache.tau_hat) {
            let dz: Vec<T> = d.iter().zip(tau).map(|(&g, &t)| g * (T::one() - t * t)).collect();
            let x = self.transform_input(&cache.branches);
            let dx = self.head_backward(self.heads.transform, &dz, &x, grads);
            match self.spec.variant {
                NetworkVariant::Disentangle => add_into(&mut dpooled[0], &dx),
                NetworkVariant::Siamese => {
                    add_into(&mut dpooled[1], &dx[..f]);
                    add_into(&mut dpooled[2], &dx[f..]);
                }
                _ => {
                    add_into(&mut dpooled[0], &dx[..f]);
                    add_into(&mut dpooled[1], &dx[f..]);
                }
            }
        }
        for (pass, dp) in cache.branches.iter().zip(&dpooled) {
            if dp.iter().all(|v| *v == T::zero()) {
                continue;
            }
            self.trunk_backward(pass, self.pooled_grad(dp), grads);
        }
    }

    /// Siamese wiring: order logits from the shuffled clip, transform estimate
    /// from the pooled features of the original and transformed clips.
    pub fn forward_siamese(
        &self,
        shuffled: &VideoClip,
        original: &VideoClip,
        transformed: &VideoClip,
    ) -> Result<(Vec<T>, Vec<T>)> {
        if self.spec.variant != NetworkVariant::Siamese {
            return Err(Error::invalid(format!("forward_siamese on a {} network", self.spec.variant)));
        }
        let views = PretextViews {
            shuffled,
            original,
            transformed,
            corrupted: original,
        };
        let (out, _) = self.pretext_forward(&views)?;
        Ok((out.order_logits.unwrap_or_default(), out.tau_hat.unwrap_or_default()))
    }

    /// Disentangle wiring: a single pass over the corrupted clip.
    pub fn forward_disentangle(&self, corrupted: &VideoClip) -> Result<(Vec<T>, Vec<T>)> {
        if self.spec.variant != NetworkVariant::Disentangle {
            return Err(Error::invalid(format!("forward_disentangle on a {} network", self.spec.variant)));
        }
        let views = PretextViews {
            shuffled: corrupted,
            original: corrupted,
            transformed: corrupted,
            corrupted,
        };
        let (out, _) = self.pretext_forward(&views)?;
        Ok((out.order_logits.unwrap_or_default(), out.tau_hat.unwrap_or_default()))
    }

    pub fn downstream_forward(&self, clip: &VideoClip) -> Result<(DownstreamOutput<T>, DownstreamCache<T>)> {
        let x = self.input(clip)?;
        match self.spec.variant {
            NetworkVariant::Planes { .. } => {
                let (_, pass) = self.trunk_forward(x);
                let logits = self.head(self.heads.plane, &pass.pooled);
                Ok((DownstreamOutput::Plane { logits }, DownstreamCache { pass }))
            }
            NetworkVariant::Saliency => {
                let (map, pass) = self.trunk_forward(x);
                let w = self.heads.saliency.expect("saliency head");
                let coarse = self.saliency_coarse(&map, self.params.data(w));
                let logits = self.upsampler.as_ref().expect("saliency upsampler").forward(&coarse);
                let map = softmax(&logits);
                Ok((DownstreamOutput::Saliency { logits, map }, DownstreamCache { pass }))
            }
            v => Err(Error::invalid(format!("{v} network has no downstream head"))),
        }
    }

    fn saliency_coarse(&self, map: &[T], w: &[T]) -> Vec<T> {
        let hw = self.feature_hw();
        let mut out = vec![T::zero(); hw];
        for (c, ch) in map.chunks(hw).enumerate() {
            for (o, &v) in out.iter_mut().zip(ch) {
                *o += w[c] * v;
            }
        }
        out
    }

    /// `d_logits` is the gradient on plane logits or on the pre-softmax
    /// saliency scores. With `backprop_trunk` false only the head learns.
    pub fn downstream_backward(
        &self,
        cache: &DownstreamCache<T>,
        d_logits: &[T],
        grads: &mut ParameterSet<T>,
        backprop_trunk: bool,
    ) {
        let pass = &cache.pass;
        let dmap = match self.spec.variant {
            NetworkVariant::Planes { .. } => {
                let dp = self.head_backward(self.heads.plane, d_logits, &pass.pooled, grads);
                self.pooled_grad(&dp)
            }
            NetworkVariant::Saliency => {
                let dcoarse = self.upsampler.as_ref().expect("saliency upsampler").backward(d_logits);
                let w = self.heads.saliency.expect("saliency head");
                let hw = self.feature_hw();
                let feat = &pass.stages.last().expect("stages").y;
                let wv = self.params.data(w).to_vec();
                let dw = grads.data_mut(w);
                let mut dmap = Vec::with_capacity(feat.len());
                for (c, ch) in feat.chunks(hw).enumerate() {
                    dw[c] += ch.iter().zip(&dcoarse).map(|(&a, &d)| a * d).sum();
                    dmap.extend(dcoarse.iter().map(|&d| d * wv[c]));
                }
                dmap
            }
            _ => return,
        };
        if backprop_trunk {
            self.trunk_backward(pass, dmap, grads);
        }
    }

    /// Single-frame or clip input for the downstream heads.
    pub fn forward_downstream(&self, clip: &VideoClip) -> Result<DownstreamOutput<T>> {
        Ok(self.downstream_forward(clip)?.0)
    }

    /// Replicates one frame across the input channels and runs the head.
    pub fn forward_frame(&self, frame: &[f32]) -> Result<DownstreamOutput<T>> {
        let b = &self.spec.backbone;
        let clip = VideoClip::replicate_frame(frame, b.input_channels.max(2), b.input_size, b.input_size)?;
        self.forward_downstream(&clip)
    }

    /// Pooled trunk feature of a clip.
    pub fn features(&self, clip: &VideoClip) -> Result<Vec<T>> {
        Ok(self.trunk_forward(self.input(clip)?).1.pooled)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(variant: NetworkVariant) -> NetworkSpec {
        NetworkSpec {
            backbone: BackboneSpec {
                input_channels: 4,
                widths: vec![8, 8],
                dilations: vec![1, 2],
                strides: vec![2, 1],
                se_ratio: 4,
                input_size: 8,
                norm_groups: 4,
            },
            variant,
        }
    }

    #[test]
    fn default_feature_length_and_se_width() {
        let b = BackboneSpec::default();
        b.validate().unwrap();
        assert_eq!(b.feature_len(), 64);
        assert_eq!(b.feature_size(), 16);
        assert_eq!(b.se_hidden(1), 8);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut b = BackboneSpec::default();
        b.widths = vec![16];
        b.dilations = vec![1];
        b.strides = vec![1];
        assert!(b.validate().is_err());
        let mut b = BackboneSpec::default();
        b.widths[1] = 30;
        assert!(b.validate().is_err());
        let mut b = BackboneSpec::default();
        b.dilations[2] = 0;
        assert!(b.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let spec = small_spec(NetworkVariant::Siamese);
        let a = Network::<f32>::build(&spec, 3).unwrap();
        let b = Network::<f32>::build(&spec, 3).unwrap();
        let c = Network::<f32>::build(&spec, 4).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn head_arities() {
        let spec = small_spec(NetworkVariant::Siamese);
        let net = Network::<f32>::build(&spec, 1).unwrap();
        let clip = VideoClip::new(vec![0.5; 4 * 64], 4, 8, 8).unwrap();
        let (o, t) = net.forward_siamese(&clip, &clip, &clip).unwrap();
        assert_eq!(o.len(), 12);
        assert_eq!(t.len(), 6);
        assert!(t.iter().all(|v| v.abs() < 1.0));
        assert!(net.forward_disentangle(&clip).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for name in NetworkVariant::PRETEXT_NAMES {
            assert_eq!(name.parse::<NetworkVariant>().unwrap().to_string(), name);
        }
        let err = "sideways".parse::<NetworkVariant>().unwrap_err().to_string();
        assert!(err.contains("siamese|disentangle|order-only|transform-only"));
    }
}
