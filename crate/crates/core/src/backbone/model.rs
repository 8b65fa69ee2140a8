use std::collections::HashMap;

use super::config::ModelConfig;
use super::params::{ParamId, ParamStore};
use super::patch::{patchify_raw, unpatchify_raw};
use super::resize_positional_embedding;
use crate::error::{bail, Result};
use crate::kvattn::{
    mha_backward, mha_forward, self_attention_backward, self_attention_forward, AttnCache, AttnView, CompressionOp,
    CompressionSpec, ConvView, MhaCache,
};
use crate::numerics::ops::{
    gelu, gelu_grad, layernorm_rows, layernorm_rows_backward, linear, linear_backward, silu, silu_grad, LayerNormCache,
    LAYERNORM_EPS,
};
use crate::numerics::{check_gradients, GradCheckOptions, GradReport, Rng, Stream, Tensor};

/// Deliberate gradient bugs, used as negative controls for gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the gradient of block 1's second MLP weight by 1.1.
    MlpWeightScale,
}

/// Initialisation of the positional embedding when the grid changes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PeInit {
    /// Bilinear resize of the current embedding.
    Interpolate,
    /// Fresh Gaussian entries with this standard deviation.
    Random { std: f64 },
}

/// Initialisation of retrofitted conv compression weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvInit {
    /// Kernel `1/R^2`, zero bias, unit norm gain, zero norm bias.
    Avg,
    /// Kernel and bias uniform in `[-1/R, 1/R]`, unit norm gain, zero norm bias.
    Random,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
    Const(f64),
    SinCos,
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut Rng) -> Tensor {
    match init {
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::Uniform(b) => Tensor::from_fn(shape, |_| b * (2.0 * rng.uniform() - 1.0)),
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Const(v) => Tensor::full(shape, v),
        Init::SinCos => sincos_2d(shape[0], shape[1], shape[2]),
    }
}

/// Fixed 2-D sine/cosine table: the first half of the channels encodes the
/// row index, the second half the column index.
fn sincos_2d(h: usize, w: usize, c: usize) -> Tensor {
    let half = c / 2;
    let quarter = (half / 2).max(1);
    Tensor::from_fn(&[h, w, c], |idx| {
        let ch = idx % c;
        let j = (idx / c) % w;
        let i = idx / (c * w);
        let (pos, k) = if ch < half { (i, ch) } else { (j, ch - half) };
        let f = k % quarter;
        let omega = 1.0 / 10000f64.powf(f as f64 / quarter as f64);
        if k < quarter {
            (pos as f64 * omega).sin()
        } else {
            (pos as f64 * omega).cos()
        }
    })
}

fn conv_inits(spec: &CompressionSpec, c: usize, init: ConvInit) -> [(String, Vec<usize>, Init); 4] {
    let r = spec.stride;
    let (kernel, bias) = match init {
        ConvInit::Avg => (Init::Const(1.0 / (r * r) as f64), Init::Zeros),
        ConvInit::Random => (Init::Uniform(1.0 / r as f64), Init::Uniform(1.0 / r as f64)),
    };
    [
        ("attn.sr.kernel".into(), vec![c, r, r], kernel),
        ("attn.sr.bias".into(), vec![c], bias),
        ("attn.norm.gain".into(), vec![c], Init::Ones),
        ("attn.norm.bias".into(), vec![c], Init::Zeros),
    ]
}

/// Every parameter of a model with this config, in store order.
fn layout(cfg: &ModelConfig, conv_init: ConvInit) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.channels;
    let te = cfg.time_embed_dim;
    let hidden = cfg.mlp_ratio * c;
    let out_dim = cfg.patch_dim();
    let inv = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut l: Vec<(String, Vec<usize>, Init)> = vec![
        ("patch.weight".into(), vec![cfg.patch_dim(), c], inv(cfg.patch_dim())),
        ("patch.bias".into(), vec![c], Init::Zeros),
        ("pos_embed".into(), vec![cfg.grid.0, cfg.grid.1, c], Init::SinCos),
        ("time.fc1.weight".into(), vec![te, c], inv(te)),
        ("time.fc1.bias".into(), vec![c], Init::Zeros),
        ("time.fc2.weight".into(), vec![c, c], inv(c)),
        ("time.fc2.bias".into(), vec![c], Init::Zeros),
        ("modulation.weight".into(), vec![c, 4 * c * cfg.depth], Init::Zeros),
        ("modulation.bias".into(), vec![4 * c * cfg.depth], Init::Zeros),
        ("cond.table".into(), vec![cfg.cond_vocab, cfg.cond_dim], Init::Normal(1.0)),
    ];
    for b in 1..=cfg.depth {
        let p = |s: &str| format!("block{b}.{s}");
        l.push((p("norm1.gain"), vec![c], Init::Ones));
        l.push((p("norm1.bias"), vec![c], Init::Zeros));
        l.push((p("attn.qkv"), vec![c, 3 * c], inv(c)));
        l.push((p("attn.proj"), vec![c, c], inv(c)));
        if let Some(spec) = cfg.spec_for_block(b).filter(|s| s.has_conv_weights()) {
            for (name, shape, init) in conv_inits(spec, c, conv_init) {
                l.push((p(&name), shape, init));
            }
        }
        l.push((p("norm2.gain"), vec![c], Init::Ones));
        l.push((p("norm2.bias"), vec![c], Init::Zeros));
        l.push((p("cross.q"), vec![c, c], inv(c)));
        l.push((p("cross.k"), vec![cfg.cond_dim, c], inv(cfg.cond_dim)));
        l.push((p("cross.v"), vec![cfg.cond_dim, c], inv(cfg.cond_dim)));
        l.push((p("cross.proj"), vec![c, c], inv(c)));
        l.push((p("norm3.gain"), vec![c], Init::Ones));
        l.push((p("norm3.bias"), vec![c], Init::Zeros));
        l.push((p("mlp.fc1.weight"), vec![c, hidden], inv(c)));
        l.push((p("mlp.fc1.bias"), vec![hidden], Init::Zeros));
        l.push((p("mlp.fc2.weight"), vec![hidden, c], inv(hidden)));
        l.push((p("mlp.fc2.bias"), vec![c], Init::Zeros));
    }
    l.push(("final.norm.gain".into(), vec![c], Init::Ones));
    l.push(("final.norm.bias".into(), vec![c], Init::Zeros));
    l.push(("final.proj.weight".into(), vec![c, out_dim], Init::Zeros));
    l.push(("final.proj.bias".into(), vec![out_dim], Init::Zeros));
    l
}

#[derive(Clone, Debug)]
struct BlockIds {
    norm1: (ParamId, ParamId),
    qkv: ParamId,
    proj: ParamId,
    conv: Option<[ParamId; 4]>,
    spec: CompressionSpec,
    norm2: (ParamId, ParamId),
    cq: ParamId,
    ck: ParamId,
    cv: ParamId,
    cproj: ParamId,
    norm3: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Ids {
    patch: (ParamId, ParamId),
    pe: ParamId,
    t1: (ParamId, ParamId),
    t2: (ParamId, ParamId),
    modulation: (ParamId, ParamId),
    cond: ParamId,
    blocks: Vec<BlockIds>,
    final_norm: (ParamId, ParamId),
    final_proj: (ParamId, ParamId),
}

fn resolve_ids(cfg: &ModelConfig, store: &ParamStore) -> Ids {
    let id = |n: &str| store.id(n).unwrap_or_else(|| panic!("missing parameter {n}"));
    let pair = |a: &str, b: &str| (id(a), id(b));
    let blocks = (1..=cfg.depth)
        .map(|b| {
            let p = |s: &str| format!("block{b}.{s}");
            let spec = cfg.spec_for_block(b).copied().unwrap_or_else(CompressionSpec::none);
            BlockIds {
                norm1: pair(&p("norm1.gain"), &p("norm1.bias")),
                qkv: id(&p("attn.qkv")),
                proj: id(&p("attn.proj")),
                conv: spec.has_conv_weights().then(|| {
                    [
                        id(&p("attn.sr.kernel")),
                        id(&p("attn.sr.bias")),
                        id(&p("attn.norm.gain")),
                        id(&p("attn.norm.bias")),
                    ]
                }),
                spec,
                norm2: pair(&p("norm2.gain"), &p("norm2.bias")),
                cq: id(&p("cross.q")),
                ck: id(&p("cross.k")),
                cv: id(&p("cross.v")),
                cproj: id(&p("cross.proj")),
                norm3: pair(&p("norm3.gain"), &p("norm3.bias")),
                fc1: pair(&p("mlp.fc1.weight"), &p("mlp.fc1.bias")),
                fc2: pair(&p("mlp.fc2.weight"), &p("mlp.fc2.bias")),
            }
        })
        .collect();
    Ids {
        patch: pair("patch.weight", "patch.bias"),
        pe: id("pos_embed"),
        t1: pair("time.fc1.weight", "time.fc1.bias"),
        t2: pair("time.fc2.weight", "time.fc2.bias"),
        modulation: pair("modulation.weight", "modulation.bias"),
        cond: id("cond.table"),
        blocks,
        final_norm: pair("final.norm.gain", "final.norm.bias"),
        final_proj: pair("final.proj.weight", "final.proj.bias"),
    }
}

/// Gradients indexed like the parameter store.
#[derive(Clone, Debug)]
pub struct Grads(Vec<Vec<f64>>);

impl Grads {
    fn zeros(store: &ParamStore) -> Self {
        Self(store.tensors().iter().map(|t| vec![0.0; t.len()]).collect())
    }

    fn slot(&mut self, id: ParamId, store: &ParamStore) -> &mut [f64] {
        debug_assert!(id.index() < store.len());
        &mut self.0[id.index()]
    }

    pub fn from_vecs(grads: Vec<Vec<f64>>) -> Self {
        Self(grads)
    }

    pub fn into_vecs(self) -> Vec<Vec<f64>> {
        self.0
    }

    pub fn as_vecs(&self) -> &[Vec<f64>] {
        &self.0
    }
}

struct CrossCache {
    mha: MhaCache,
    o: Vec<f64>,
}

struct BlockCache {
    ln1: LayerNormCache,
    n1: Vec<f64>,
    attn: Vec<AttnCache>,
    ln2: LayerNormCache,
    n2: Vec<f64>,
    cross: Vec<CrossCache>,
    ln3: LayerNormCache,
    n3: Vec<f64>,
    m3: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Everything [`Dit::backward`] needs from a forward pass.
pub struct ForwardCache {
    batch: usize,
    labels: Vec<usize>,
    patches: Vec<f64>,
    t_sin: Vec<f64>,
    t_a1: Vec<f64>,
    t_s1: Vec<f64>,
    temb: Vec<f64>,
    mod_in: Vec<f64>,
    mods: Vec<f64>,
    ctok: Vec<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    final_n: Vec<f64>,
    image: (usize, usize),
}

impl ForwardCache {
    /// Per block, the `(N, N')` self-attention score shape of sample 0.
    pub fn score_shapes(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|b| b.attn[0].score_shape()).collect()
    }

    /// Self-attention input rows of `block` (1-based) for sample `b`.
    pub fn attention_input(&self, block: usize, b: usize) -> &[f64] {
        self.blocks[block - 1].attn[b].input()
    }

    /// Compressed keys seen by `block` (1-based) for sample `b`.
    pub fn compressed_keys(&self, block: usize, b: usize) -> &[f64] {
        self.blocks[block - 1].attn[b].compressed_keys()
    }
}

/// The toy diffusion transformer.
#[derive(Clone, Debug)]
pub struct Dit {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
    fault: Option<BackwardFault>,
}

fn sinusoid(t: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for k in 0..half {
        let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t * f).cos();
        out[half + k] = (t * f).sin();
    }
}

impl Dit {
    /// Fresh model; weights drawn from the init stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, Stream::Init, 0);
        let mut store = ParamStore::new();
        for (name, shape, init) in layout(&config, ConvInit::Avg) {
            store.add(name, init_tensor(&shape, init, &mut rng));
        }
        let ids = resolve_ids(&config, &store);
        Ok(Self { config, params: store, ids, fault: None })
    }

    /// Rebuilds a model from named tensors; names and shapes must match the
    /// config's layout exactly.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config, ConvInit::Avg);
        let mut by_name: HashMap<String, Tensor> = HashMap::new();
        for (n, t) in tensors {
            if by_name.insert(n.clone(), t).is_some() {
                bail!(Config, "duplicate tensor {n}");
            }
        }
        let mut store = ParamStore::new();
        for (name, shape, _) in expected {
            let Some(t) = by_name.remove(&name) else {
                bail!(Config, "missing tensor {name}");
            };
            if t.shape() != shape.as_slice() {
                bail!(Config, "tensor {name} has shape {:?}, config expects {shape:?}", t.shape());
            }
            store.add(name, t);
        }
        if let Some(extra) = by_name.keys().next() {
            bail!(Config, "unexpected tensor {extra}");
        }
        let ids = resolve_ids(&config, &store);
        Ok(Self { config, params: store, ids, fault: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn positional_embedding(&self) -> &Tensor {
        self.params.get(self.ids.pe)
    }

    /// Adds `N(0, std^2)` noise to every parameter, including the zero-init
    /// ones, so that all gradients are nonzero.
    pub fn perturb(&mut self, std: f64, seed: u64) {
        let mut rng = Rng::derive(seed, Stream::Misc, 0);
        for t in self.params.tensors_mut() {
            for v in t.data_mut() {
                *v += std * rng.normal();
            }
        }
    }

    pub fn set_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    /// Copy with a different patch grid. Every weight except the positional
    /// embedding is kept; the embedding is resized or redrawn per `pe`.
    pub fn with_grid(&self, grid: (usize, usize), pe: PeInit, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.grid = grid;
        config.validate()?;
        let new_pe = match pe {
            PeInit::Interpolate => resize_positional_embedding(self.positional_embedding(), grid)?,
            PeInit::Random { std } => {
                let mut rng = Rng::derive(seed, Stream::Init, 1);
                Tensor::randn(&[grid.0, grid.1, config.channels], std, &mut rng)
            }
        };
        let tensors = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), if n == "pos_embed" { new_pe.clone() } else { t.clone() }))
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Adds conv compression to the blocks in `spec.layers`. Existing
    /// weights are copied bitwise; new conv/norm weights follow `init`.
    pub fn retrofit_compression(&self, spec: CompressionSpec, init: ConvInit, seed: u64) -> Result<Self> {
        if spec.op != CompressionOp::Conv {
            bail!(Config, "retrofit inserts conv compression, got operator {}", spec.op);
        }
        let mut config = self.config.clone();
        config.compression.push(spec);
        config.validate()?;
        let mut rng = Rng::derive(seed, Stream::Init, 2);
        let mut store = ParamStore::new();
        for (name, shape, init) in layout(&config, init) {
            let t = match self.params.by_name(&name) {
                Some(t) => t.clone(),
                None => init_tensor(&shape, init, &mut rng),
            };
            store.add(name, t);
        }
        let ids = resolve_ids(&config, &store);
        Ok(Self { config, params: store, ids, fault: self.fault })
    }

    fn d(&self, id: ParamId) -> &[f64] {
        self.params.data(id)
    }

    fn attn_view(&self, blk: &BlockIds) -> AttnView<'_> {
        AttnView {
            channels: self.config.channels,
            heads: self.config.heads,
            qkv: self.d(blk.qkv),
            out: self.d(blk.proj),
            conv: blk.conv.map(|[k, b, g, nb]| ConvView {
                kernel: self.d(k),
                bias: self.d(b),
                norm_gain: self.d(g),
                norm_bias: self.d(nb),
            }),
        }
    }

    fn check_inputs(&self, x: &Tensor, t: &[usize], labels: &[usize]) -> Result<(usize, usize, usize)> {
        let cfg = &self.config;
        let [b, h, w, c] = *x.shape() else {
            bail!(Dimension, "input must be [B, H, W, C], got {:?}", x.shape());
        };
        if c != cfg.in_channels {
            bail!(Dimension, "input has {c} channels, model expects {}", cfg.in_channels);
        }
        if (h, w) != cfg.image_size() {
            bail!(
                Layout,
                "input is {h}x{w} but the positional embedding covers {:?} (patch {})",
                cfg.image_size(),
                cfg.patch_size
            );
        }
        if t.len() != b {
            bail!(Dimension, "{} timesteps for a batch of {b}", t.len());
        }
        if labels.len() != b * cfg.cond_tokens {
            bail!(Dimension, "{} labels for a batch of {b} x {} condition tokens", labels.len(), cfg.cond_tokens);
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= cfg.cond_vocab) {
            bail!(Config, "label {l} is outside the vocabulary of {}", cfg.cond_vocab);
        }
        Ok((b, h, w))
    }

    /// Predicted noise for `x` (`[B, H, W, C_in]`) at timesteps `t` with
    /// `B * cond_tokens` condition labels.
    pub fn forward(&self, x: &Tensor, t: &[usize], labels: &[usize]) -> Result<Tensor> {
        self.forward_with_cache(x, t, labels).map(|(y, _)| y)
    }

    pub fn forward_with_cache(&self, x: &Tensor, t: &[usize], labels: &[usize]) -> Result<(Tensor, ForwardCache)> {
        let (b, him, wim) = self.check_inputs(x, t, labels)?;
        let cfg = &self.config;
        let (c, p, te, cd) = (cfg.channels, cfg.patch_size, cfg.time_embed_dim, cfg.cond_dim);
        let n = cfg.tokens();
        let rows = b * n;
        let pd = cfg.patch_dim();
        let ids = &self.ids;

        let patches = patchify_raw(x.data(), b, him, wim, cfg.in_channels, p);
        let mut h = linear(&patches, rows, self.d(ids.patch.0), pd, c, Some(self.d(ids.patch.1)));
        let pe = self.d(ids.pe);
        for row in h.chunks_exact_mut(n * c) {
            row.iter_mut().zip(pe).for_each(|(a, b)| *a += b);
        }

        let mut t_sin = vec![0.0; b * te];
        for (s, chunk) in t_sin.chunks_exact_mut(te).enumerate() {
            sinusoid(t[s] as f64, te, chunk);
        }
        let t_a1 = linear(&t_sin, b, self.d(ids.t1.0), te, c, Some(self.d(ids.t1.1)));
        let t_s1: Vec<f64> = t_a1.iter().map(|&v| silu(v)).collect();
        let temb = linear(&t_s1, b, self.d(ids.t2.0), c, c, Some(self.d(ids.t2.1)));
        for (s, chunk) in h.chunks_exact_mut(n * c).enumerate() {
            let te_row = &temb[s * c..(s + 1) * c];
            for row in chunk.chunks_exact_mut(c) {
                row.iter_mut().zip(te_row).for_each(|(a, b)| *a += b);
            }
        }
        let mod_in: Vec<f64> = temb.iter().map(|&v| silu(v)).collect();
        let md = 4 * c * cfg.depth;
        let mods = linear(&mod_in, b, self.d(ids.modulation.0), c, md, Some(self.d(ids.modulation.1)));

        let table = self.d(ids.cond);
        let ctok: Vec<f64> = labels.iter().flat_map(|&l| table[l * cd..(l + 1) * cd].iter().copied()).collect();

        let mut blocks = Vec::with_capacity(cfg.depth);
        for (bi, blk) in ids.blocks.iter().enumerate() {
            let (h_next, cache) = self.block_forward(bi, blk, h, b, &mods, &ctok)?;
            h = h_next;
            blocks.push(cache);
        }

        let (final_n, final_ln) =
            layernorm_rows(&h, c, Some(self.d(ids.final_norm.0)), Some(self.d(ids.final_norm.1)), LAYERNORM_EPS);
        let out = linear(&final_n, rows, self.d(ids.final_proj.0), c, pd, Some(self.d(ids.final_proj.1)));
        let y = Tensor::new(x.shape(), unpatchify_raw(&out, b, him, wim, cfg.in_channels, p))?;
        y.ensure_finite("model output")?;
        let cache = ForwardCache {
            batch: b,
            labels: labels.to_vec(),
            patches,
            t_sin,
            t_a1,
            t_s1,
            temb,
            mod_in,
            mods,
            ctok,
            blocks,
            final_ln,
            final_n,
            image: (him, wim),
        };
        Ok((y, cache))
    }

    fn block_forward(
        &self,
        bi: usize,
        blk: &BlockIds,
        h: Vec<f64>,
        b: usize,
        mods: &[f64],
        ctok: &[f64],
    ) -> Result<(Vec<f64>, BlockCache)> {
        let cfg = &self.config;
        let (c, heads, cd, l) = (cfg.channels, cfg.heads, cfg.cond_dim, cfg.cond_tokens);
        let (gh, gw) = cfg.grid;
        let n = gh * gw;
        let rows = b * n;
        let md = 4 * c * cfg.depth;
        let modv = |s: usize, k: usize| &mods[s * md + (bi * 4 + k) * c..][..c];

        // self-attention
        let (n1, ln1) = layernorm_rows(&h, c, Some(self.d(blk.norm1.0)), Some(self.d(blk.norm1.1)), LAYERNORM_EPS);
        let mut m1 = n1.clone();
        for s in 0..b {
            let (shift, scale) = (modv(s, 0), modv(s, 1));
            for row in m1[s * n * c..(s + 1) * n * c].chunks_exact_mut(c) {
                for j in 0..c {
                    row[j] = row[j] * (1.0 + scale[j]) + shift[j];
                }
            }
        }
        let view = self.attn_view(blk);
        let mut h1 = h;
        let mut attn = Vec::with_capacity(b);
        for s in 0..b {
            let (a, cache) = self_attention_forward(&m1[s * n * c..(s + 1) * n * c], gh, gw, &blk.spec, &view)?;
            h1[s * n * c..(s + 1) * n * c].iter_mut().zip(&a).for_each(|(x, y)| *x += y);
            attn.push(cache);
        }

        // cross-attention to condition tokens (never compressed)
        let (n2, ln2) = layernorm_rows(&h1, c, Some(self.d(blk.norm2.0)), Some(self.d(blk.norm2.1)), LAYERNORM_EPS);
        let mut h2 = h1;
        let mut cross = Vec::with_capacity(b);
        for s in 0..b {
            let q = linear(&n2[s * n * c..(s + 1) * n * c], n, self.d(blk.cq), c, c, None);
            let ct = &ctok[s * l * cd..(s + 1) * l * cd];
            let k = linear(ct, l, self.d(blk.ck), cd, c, None);
            let v = linear(ct, l, self.d(blk.cv), cd, c, None);
            let (o, mha) = mha_forward(&q, &k, &v, n, l, c, heads);
            let y = linear(&o, n, self.d(blk.cproj), c, c, None);
            h2[s * n * c..(s + 1) * n * c].iter_mut().zip(&y).for_each(|(x, y)| *x += y);
            cross.push(CrossCache { mha, o });
        }

        // MLP
        let (n3, ln3) = layernorm_rows(&h2, c, Some(self.d(blk.norm3.0)), Some(self.d(blk.norm3.1)), LAYERNORM_EPS);
        let mut m3 = n3.clone();
        for s in 0..b {
            let (shift, scale) = (modv(s, 2), modv(s, 3));
            for row in m3[s * n * c..(s + 1) * n * c].chunks_exact_mut(c) {
                for j in 0..c {
                    row[j] = row[j] * (1.0 + scale[j]) + shift[j];
                }
            }
        }
        let hidden = cfg.mlp_ratio * c;
        let u = linear(&m3, rows, self.d(blk.fc1.0), c, hidden, Some(self.d(blk.fc1.1)));
        let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        let z = linear(&g, rows, self.d(blk.fc2.0), hidden, c, Some(self.d(blk.fc2.1)));
        let mut h3 = h2;
        h3.iter_mut().zip(&z).for_each(|(x, y)| *x += y);

        Ok((h3, BlockCache { ln1, n1, attn, ln2, n2, cross, ln3, n3, m3, u, g }))
    }

    /// Reverse pass from `d_out` (gradient w.r.t. the predicted noise).
    /// Returns gradients for every parameter, in store order.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Tensor) -> Result<Grads> {
        let cfg = &self.config;
        let ids = &self.ids;
        let store = &self.params;
        let (c, p, te, cd) = (cfg.channels, cfg.patch_size, cfg.time_embed_dim, cfg.cond_dim);
        let b = cache.batch;
        let n = cfg.tokens();
        let rows = b * n;
        let pd = cfg.patch_dim();
        let (him, wim) = cache.image;
        if d_out.len() != b * him * wim * cfg.in_channels {
            bail!(Dimension, "output gradient has {} values", d_out.len());
        }
        let mut grads = Grads::zeros(store);

        let d_patch_out = patchify_raw(d_out.data(), b, him, wim, cfg.in_channels, p);
        let mut dw = vec![0.0; c * pd];
        let mut db = vec![0.0; pd];
        let d_final_n = linear_backward(&cache.final_n, rows, self.d(ids.final_proj.0), c, pd, &d_patch_out, &mut dw, Some(&mut db));
        grads.slot(ids.final_proj.0, store).copy_from_slice(&dw);
        grads.slot(ids.final_proj.1, store).copy_from_slice(&db);
        let mut dg = vec![0.0; c];
        let mut dbb = vec![0.0; c];
        let mut dh = layernorm_rows_backward(&cache.final_ln, Some(self.d(ids.final_norm.0)), &d_final_n, Some(&mut dg), Some(&mut dbb));
        grads.slot(ids.final_norm.0, store).copy_from_slice(&dg);
        grads.slot(ids.final_norm.1, store).copy_from_slice(&dbb);

        let md = 4 * c * cfg.depth;
        let mut dmods = vec![0.0; b * md];
        let mut dctok = vec![0.0; cache.ctok.len()];
        for (bi, blk) in ids.blocks.iter().enumerate().rev() {
            dh = self.block_backward(bi, blk, &cache.blocks[bi], dh, b, &cache.mods, &cache.ctok, &mut dmods, &mut dctok, &mut grads)?;
        }

        // condition table
        {
            let slot = grads.slot(ids.cond, store);
            for (k, &lab) in cache.labels.iter().enumerate() {
                for j in 0..cd {
                    slot[lab * cd + j] += dctok[k * cd + j];
                }
            }
        }

        // modulation and timestep MLP
        let mut dw = vec![0.0; c * md];
        let mut db = vec![0.0; md];
        let d_mod_in = linear_backward(&cache.mod_in, b, self.d(ids.modulation.0), c, md, &dmods, &mut dw, Some(&mut db));
        grads.slot(ids.modulation.0, store).copy_from_slice(&dw);
        grads.slot(ids.modulation.1, store).copy_from_slice(&db);
        let mut dtemb: Vec<f64> = d_mod_in.iter().zip(&cache.temb).map(|(g, &v)| g * silu_grad(v)).collect();
        for s in 0..b {
            for row in dh[s * n * c..(s + 1) * n * c].chunks_exact(c) {
                dtemb[s * c..(s + 1) * c].iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        let mut dw = vec![0.0; c * c];
        let mut db = vec![0.0; c];
        let d_s1 = linear_backward(&cache.t_s1, b, self.d(ids.t2.0), c, c, &dtemb, &mut dw, Some(&mut db));
        grads.slot(ids.t2.0, store).copy_from_slice(&dw);
        grads.slot(ids.t2.1, store).copy_from_slice(&db);
        let d_a1: Vec<f64> = d_s1.iter().zip(&cache.t_a1).map(|(g, &v)| g * silu_grad(v)).collect();
        let mut dw = vec![0.0; te * c];
        let mut db = vec![0.0; c];
        linear_backward(&cache.t_sin, b, self.d(ids.t1.0), te, c, &d_a1, &mut dw, Some(&mut db));
        grads.slot(ids.t1.0, store).copy_from_slice(&dw);
        grads.slot(ids.t1.1, store).copy_from_slice(&db);

        // positional embedding and patch embedding
        {
            let slot = grads.slot(ids.pe, store);
            for chunk in dh.chunks_exact(n * c) {
                slot.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
        }
        let mut dw = vec![0.0; pd * c];
        let mut db = vec![0.0; c];
        linear_backward(&cache.patches, rows, self.d(ids.patch.0), pd, c, &dh, &mut dw, Some(&mut db));
        grads.slot(ids.patch.0, store).copy_from_slice(&dw);
        grads.slot(ids.patch.1, store).copy_from_slice(&db);

        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        bi: usize,
        blk: &BlockIds,
        bc: &BlockCache,
        dh3: Vec<f64>,
        b: usize,
        mods: &[f64],
        ctok: &[f64],
        dmods: &mut [f64],
        dctok: &mut [f64],
        grads: &mut Grads,
    ) -> Result<Vec<f64>> {
        let store = &self.params;
        let cfg = &self.config;
        let (c, cd, l) = (cfg.channels, cfg.cond_dim, cfg.cond_tokens);
        let n = cfg.tokens();
        let rows = b * n;
        let md = 4 * c * cfg.depth;
        let hidden = cfg.mlp_ratio * c;
        let off = |s: usize, k: usize| s * md + (bi * 4 + k) * c;

        // MLP
        let mut dw2 = vec![0.0; hidden * c];
        let mut db2 = vec![0.0; c];
        let d_g = linear_backward(&bc.g, rows, self.d(blk.fc2.0), hidden, c, &dh3, &mut dw2, Some(&mut db2));
        if bi == 0 && self.fault == Some(BackwardFault::MlpWeightScale) {
            dw2.iter_mut().for_each(|v| *v *= 1.1);
        }
        grads.slot(blk.fc2.0, store).copy_from_slice(&dw2);
        grads.slot(blk.fc2.1, store).copy_from_slice(&db2);
        let d_u: Vec<f64> = d_g.iter().zip(&bc.u).map(|(g, &u)| g * gelu_grad(u)).collect();
        let mut dw1 = vec![0.0; c * hidden];
        let mut db1 = vec![0.0; hidden];
        let d_m3 = linear_backward(&bc.m3, rows, self.d(blk.fc1.0), c, hidden, &d_u, &mut dw1, Some(&mut db1));
        grads.slot(blk.fc1.0, store).copy_from_slice(&dw1);
        grads.slot(blk.fc1.1, store).copy_from_slice(&db1);
        let d_n3 = modulation_backward(&d_m3, &bc.n3, b, n, c, mods, dmods, |s| (off(s, 2), off(s, 3)));
        let mut dg = vec![0.0; c];
        let mut dbb = vec![0.0; c];
        let mut dh2 = dh3;
        let d = layernorm_rows_backward(&bc.ln3, Some(self.d(blk.norm3.0)), &d_n3, Some(&mut dg), Some(&mut dbb));
        dh2.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        grads.slot(blk.norm3.0, store).copy_from_slice(&dg);
        grads.slot(blk.norm3.1, store).copy_from_slice(&dbb);

        // cross-attention
        let mut d_n2 = vec![0.0; rows * c];
        let (mut dwq, mut dwk, mut dwv, mut dwo) = (vec![0.0; c * c], vec![0.0; cd * c], vec![0.0; cd * c], vec![0.0; c * c]);
        for s in 0..b {
            let cc = &bc.cross[s];
            let dy = &dh2[s * n * c..(s + 1) * n * c];
            let d_o = linear_backward(&cc.o, n, self.d(blk.cproj), c, c, dy, &mut dwo, None);
            let (dq, dk, dv) = mha_backward(&cc.mha, &d_o);
            let dn = linear_backward(&bc.n2[s * n * c..(s + 1) * n * c], n, self.d(blk.cq), c, c, &dq, &mut dwq, None);
            d_n2[s * n * c..(s + 1) * n * c].copy_from_slice(&dn);
            let ct = &ctok[s * l * cd..(s + 1) * l * cd];
            let dck = linear_backward(ct, l, self.d(blk.ck), cd, c, &dk, &mut dwk, None);
            let dcv = linear_backward(ct, l, self.d(blk.cv), cd, c, &dv, &mut dwv, None);
            for (j, v) in dctok[s * l * cd..(s + 1) * l * cd].iter_mut().enumerate() {
                *v += dck[j] + dcv[j];
            }
        }
        grads.slot(blk.cq, store).copy_from_slice(&dwq);
        grads.slot(blk.ck, store).copy_from_slice(&dwk);
        grads.slot(blk.cv, store).copy_from_slice(&dwv);
        grads.slot(blk.cproj, store).copy_from_slice(&dwo);
        let mut dg = vec![0.0; c];
        let mut dbb = vec![0.0; c];
        let mut dh1 = dh2;
        let d = layernorm_rows_backward(&bc.ln2, Some(self.d(blk.norm2.0)), &d_n2, Some(&mut dg), Some(&mut dbb));
        dh1.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        grads.slot(blk.norm2.0, store).copy_from_slice(&dg);
        grads.slot(blk.norm2.1, store).copy_from_slice(&dbb);

        // self-attention
        let view = self.attn_view(blk);
        let mut d_m1 = vec![0.0; rows * c];
        let mut dqkv = vec![0.0; c * 3 * c];
        let mut dproj = vec![0.0; c * c];
        let mut dconv = None;
        for s in 0..b {
            let (dx, g) = self_attention_backward(&bc.attn[s], &view, &dh1[s * n * c..(s + 1) * n * c]);
            d_m1[s * n * c..(s + 1) * n * c].copy_from_slice(&dx);
            dqkv.iter_mut().zip(&g.qkv).for_each(|(a, b)| *a += b);
            dproj.iter_mut().zip(&g.out).for_each(|(a, b)| *a += b);
            crate::kvattn::ConvGrads::merge(&mut dconv, g.conv);
        }
        grads.slot(blk.qkv, store).copy_from_slice(&dqkv);
        grads.slot(blk.proj, store).copy_from_slice(&dproj);
        if let (Some([k, kb, ng, nb]), Some(cg)) = (blk.conv, dconv) {
            grads.slot(k, store).copy_from_slice(&cg.kernel);
            grads.slot(kb, store).copy_from_slice(&cg.bias);
            grads.slot(ng, store).copy_from_slice(&cg.norm_gain);
            grads.slot(nb, store).copy_from_slice(&cg.norm_bias);
        }
        let d_n1 = modulation_backward(&d_m1, &bc.n1, b, n, c, mods, dmods, |s| (off(s, 0), off(s, 1)));
        let mut dg = vec![0.0; c];
        let mut dbb = vec![0.0; c];
        let mut dh = dh1;
        let d = layernorm_rows_backward(&bc.ln1, Some(self.d(blk.norm1.0)), &d_n1, Some(&mut dg), Some(&mut dbb));
        dh.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        grads.slot(blk.norm1.0, store).copy_from_slice(&dg);
        grads.slot(blk.norm1.1, store).copy_from_slice(&dbb);
        Ok(dh)
    }

    /// Adds `grads` into the parameter gradient buffers.
    pub fn accumulate(&mut self, grads: &Grads) {
        for (t, g) in self.params.tensors_mut().iter_mut().zip(grads.as_vecs()) {
            t.accumulate_grad(g);
        }
    }

    /// Mean squared error between predicted and target noise, with its
    /// gradient for every parameter.
    pub fn mse_loss_and_grads(&self, x: &Tensor, t: &[usize], labels: &[usize], target: &Tensor) -> Result<(f64, Grads)> {
        let (y, cache) = self.forward_with_cache(x, t, labels)?;
        let (loss, d) = mse(&y, target)?;
        Ok((loss, self.backward(&cache, &d)?))
    }

    /// Finite-difference check of [`Dit::mse_loss_and_grads`] over every
    /// parameter tensor, reported by parameter name.
    pub fn check_gradients(
        &self,
        x: &Tensor,
        t: &[usize],
        labels: &[usize],
        target: &Tensor,
        opts: &GradCheckOptions,
    ) -> Result<GradReport> {
        let mut model = self.clone();
        let params = self.params.tensors().to_vec();
        let objective = |p: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            model.params.assign(p);
            let (loss, grads) = model.mse_loss_and_grads(x, t, labels, target)?;
            let grads = grads.into_vecs().into_iter().zip(p).map(|(g, p)| Tensor::new(p.shape(), g)).collect::<Result<_>>()?;
            Ok((loss, grads))
        };
        Ok(check_gradients(objective, &params, opts)?.with_names(self.params.names()))
    }
}

/// `m = n * (1 + scale) + shift` backward: returns `dn` and accumulates the
/// scale/shift gradients into `dmods`.
#[allow(clippy::too_many_arguments)]
fn modulation_backward(
    dm: &[f64],
    nrm: &[f64],
    b: usize,
    n: usize,
    c: usize,
    mods: &[f64],
    dmods: &mut [f64],
    offsets: impl Fn(usize) -> (usize, usize),
) -> Vec<f64> {
    let mut dn = vec![0.0; dm.len()];
    for s in 0..b {
        let (shift_off, scale_off) = offsets(s);
        for t in 0..n {
            let base = (s * n + t) * c;
            for j in 0..c {
                let g = dm[base + j];
                dn[base + j] = g * (1.0 + mods[scale_off + j]);
                dmods[scale_off + j] += g * nrm[base + j];
                dmods[shift_off + j] += g;
            }
        }
    }
    dn
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        bail!(Dimension, "prediction {:?} vs target {:?}", pred.shape(), target.shape());
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let d: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let e = a - b;
            loss += e * e;
            2.0 * e / n
        })
        .collect();
    Ok((loss / n, Tensor::new(pred.shape(), d)?))
}
