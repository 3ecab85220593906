//! Desk-scale text and image encoders.
//!
//! The text encoder is a post-norm transformer that accepts one prompt vector
//! per layer; the prompt is prepended as an extra position before that layer
//! and dropped from the layer output, so the returned states cover exactly the
//! word positions. The image backbone is a stack of convolution blocks whose
//! successive outputs are the multi-level object features, and whose last
//! level, pooled and projected, is the whole-image embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{ForwardCtx, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::synthgen::{Grid, NUM_OBJECTS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            vocab_size: 200,
            d_model: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            max_len: 32,
            dropout: 0.1,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.d_model == 0 {
            return Err(config_err!("text encoder needs at least one layer, head and feature"));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(config_err!("d_model {} not divisible by {} heads", self.d_model, self.num_heads));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ffn_dim == 0 {
            return Err(config_err!("vocab_size, max_len and ffn_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBackboneConfig {
    pub in_channels: usize,
    /// Output channels per block; one block per prompt level.
    pub channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub pooled_dim: usize,
    pub image_size: usize,
    pub object_size: usize,
}

impl Default for ImageBackboneConfig {
    fn default() -> Self {
        ImageBackboneConfig {
            in_channels: 3,
            channels: vec![16, 32],
            kernel_sizes: vec![3, 3],
            strides: vec![1, 2],
            pooled_dim: 32,
            image_size: 16,
            object_size: 8,
        }
    }
}

impl ImageBackboneConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self, text_layers: usize) -> Result<()> {
        if self.channels.len() != text_layers {
            return Err(config_err!(
                "image backbone has {} levels but the text encoder has {text_layers} layers",
                self.channels.len()
            ));
        }
        if self.kernel_sizes.len() != self.channels.len() || self.strides.len() != self.channels.len() {
            return Err(config_err!("channels, kernel_sizes and strides must have equal length"));
        }
        if self.kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) || self.strides.contains(&0) {
            return Err(config_err!("kernel sizes must be odd and strides positive"));
        }
        if self.channels.contains(&0) || self.pooled_dim == 0 || self.in_channels == 0 {
            return Err(config_err!("channel counts must be positive"));
        }
        Ok(())
    }

    /// `(height, width, channels)` of every level for a square input of `size`.
    pub fn level_shapes(&self, size: usize) -> Vec<(usize, usize, usize)> {
        let mut s = size;
        self.channels
            .iter()
            .zip(&self.kernel_sizes)
            .zip(&self.strides)
            .map(|((&c, &k), &st)| {
                s = (s + 2 * (k / 2) - k) / st + 1;
                (s, s, c)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    linear: Linear,
    kernel: usize,
    stride: usize,
    in_channels: usize,
}

#[derive(Clone, Debug)]
pub struct ImageBackbone {
    cfg: ImageBackboneConfig,
    blocks: Vec<ConvBlock>,
    pool_proj: Linear,
}

/// One level of a feature map: `(h*w) x channels`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

impl ImageBackbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ImageBackboneConfig, rng: &mut R) -> Self {
        let mut cin = cfg.in_channels;
        let blocks = cfg
            .channels
            .iter()
            .zip(&cfg.kernel_sizes)
            .zip(&cfg.strides)
            .enumerate()
            .map(|(i, ((&cout, &k), &stride))| {
                let block = ConvBlock {
                    linear: Linear::new(store, &format!("image.block{i}"), k * k * cin, cout, rng),
                    kernel: k,
                    stride,
                    in_channels: cin,
                };
                cin = cout;
                block
            })
            .collect();
        let pool_proj = Linear::new(store, "image.pool_proj", cin, cfg.pooled_dim, rng);
        ImageBackbone {
            cfg: cfg.clone(),
            blocks,
            pool_proj,
        }
    }

    pub fn config(&self) -> &ImageBackboneConfig {
        &self.cfg
    }

    fn check(&self, grid: &Grid, size: usize, what: &str) -> Result<()> {
        if grid.shape != [size, size, self.cfg.in_channels] || !grid.is_consistent() {
            return Err(shape_err!(
                "{what} has shape {:?}, expected [{size}, {size}, {}]",
                grid.shape,
                self.cfg.in_channels
            ));
        }
        Ok(())
    }

    fn levels(&self, g: &mut Graph, grid: &Grid) -> Vec<FeatureMap> {
        let mut x = g.input(Tensor::from_vec(
            grid.height() * grid.width(),
            grid.channels(),
            grid.data.clone(),
        ));
        let (mut h, mut w) = (grid.height(), grid.width());
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let geom = ConvGeom {
                height: h,
                width: w,
                channels: b.in_channels,
                kernel: b.kernel,
                stride: b.stride,
                pad: b.kernel / 2,
            };
            let cols = g.im2col(x, geom);
            let y = b.linear.forward(g, cols);
            x = g.gelu(y);
            h = geom.out_height();
            w = geom.out_width();
            out.push(FeatureMap { var: x, height: h, width: w });
        }
        out
    }

    /// Per-object feature stacks, indexed `[object][level]`.
    pub fn encode_objects(&self, g: &mut Graph, objects: &[Grid]) -> Result<Vec<Vec<FeatureMap>>> {
        if objects.len() != NUM_OBJECTS {
            return Err(shape_err!("expected {NUM_OBJECTS} object crops, got {}", objects.len()));
        }
        for o in objects {
            self.check(o, self.cfg.object_size, "object crop")?;
        }
        Ok(objects.iter().map(|o| self.levels(g, o)).collect())
    }

    /// Whole-image embedding `1 x pooled_dim` from the same convolution weights.
    pub fn encode_image(&self, g: &mut Graph, image: &Grid) -> Result<Var> {
        self.check(image, self.cfg.image_size, "image")?;
        let last = *self.levels(g, image).last().expect("at least one level");
        let pooled = g.mean_rows(last.var);
        Ok(self.pool_proj.forward(g, pooled))
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    norm1: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    token_embedding: crate::params::ParamId,
    position_embedding: crate::params::ParamId,
    layers: Vec<EncoderLayer>,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &TextEncoderConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let token_embedding = store.add("text.token_embedding", Tensor::uniform(cfg.vocab_size, d, 0.1, rng));
        let position_embedding = store.add("text.position_embedding", Tensor::uniform(cfg.max_len, d, 0.1, rng));
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("text.layer{l}");
                EncoderLayer {
                    query: Linear::new(store, &format!("{p}.query"), d, d, rng),
                    key: Linear::new(store, &format!("{p}.key"), d, d, rng),
                    value: Linear::new(store, &format!("{p}.value"), d, d, rng),
                    output: Linear::new(store, &format!("{p}.output"), d, d, rng),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    ffn_in: Linear::new(store, &format!("{p}.ffn_in"), d, cfg.ffn_dim, rng),
                    ffn_out: Linear::new(store, &format!("{p}.ffn_out"), cfg.ffn_dim, d, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        TextEncoder {
            cfg: cfg.clone(),
            token_embedding,
            position_embedding,
            layers,
        }
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn value_projection(&self, layer: usize) -> Linear {
        self.layers[layer].value
    }

    pub fn output_projection(&self, layer: usize) -> Linear {
        self.layers[layer].output
    }

    fn layer_forward(&self, g: &mut Graph, layer: &EncoderLayer, x: Var, ctx: &mut ForwardCtx) -> Var {
        let d = self.cfg.d_model;
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let q = layer.query.forward(g, x);
        let k = layer.key.forward(g, x);
        let v = layer.value.forward(g, x);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, c0, c1);
            let kh = g.slice_cols(k, c0, c1);
            let vh = g.slice_cols(v, c0, c1);
            let kt = g.transpose(kh);
            let raw = g.matmul(qh, kt);
            let scores = g.scale(raw, scale);
            let attn = g.softmax_rows(scores);
            per_head.push(g.matmul(attn, vh));
        }
        let merged = if heads == 1 { per_head[0] } else { g.concat_cols(&per_head) };
        let attn_out = layer.output.forward(g, merged);
        let attn_out = ctx.dropout(g, attn_out, self.cfg.dropout);
        let res1 = g.add(x, attn_out);
        let h1 = layer.norm1.forward(g, res1);
        let f = layer.ffn_in.forward(g, h1);
        let f = g.gelu(f);
        let f = layer.ffn_out.forward(g, f);
        let f = ctx.dropout(g, f, self.cfg.dropout);
        let res2 = g.add(h1, f);
        layer.norm2.forward(g, res2)
    }

    /// Final-layer word states (`n x d_model`). With `prompts`, vector `l` is
    /// prepended before layer `l` and removed from its output.
    pub fn encode(&self, g: &mut Graph, tokens: &[usize], prompts: Option<&[Var]>, ctx: &mut ForwardCtx) -> Result<Var> {
        let n = tokens.len();
        if n == 0 || n > self.cfg.max_len {
            return Err(shape_err!("sequence length {n} outside [1, {}]", self.cfg.max_len));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(shape_err!("token id {t} outside vocabulary of {}", self.cfg.vocab_size));
        }
        if let Some(p) = prompts {
            if p.len() != self.layers.len() {
                return Err(shape_err!("{} prompt levels for {} layers", p.len(), self.layers.len()));
            }
            for &v in p {
                if g.shape(v) != (1, self.cfg.d_model) {
                    return Err(shape_err!("prompt shape {:?}, expected (1, {})", g.shape(v), self.cfg.d_model));
                }
            }
        }
        let table = g.param(self.token_embedding);
        let tok = g.gather(table, tokens);
        let pos_table = g.param(self.position_embedding);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather(pos_table, &positions);
        let mut x = g.add(tok, pos);
        x = ctx.dropout(g, x, self.cfg.dropout);
        for (l, layer) in self.layers.iter().enumerate() {
            match prompts {
                Some(p) => {
                    let with_prompt = g.concat_rows(&[p[l], x]);
                    let y = self.layer_forward(g, layer, with_prompt, ctx);
                    x = g.slice_rows(y, 1, n + 1);
                }
                None => x = self.layer_forward(g, layer, x, ctx),
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_text() -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size: 30,
            d_model: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 12,
            max_len: 10,
            dropout: 0.1,
        }
    }

    fn small_image() -> ImageBackboneConfig {
        ImageBackboneConfig {
            channels: vec![4, 6],
            pooled_dim: 5,
            ..ImageBackboneConfig::default()
        }
    }

    fn random_grid(size: usize, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid {
            shape: [size, size, 3],
            data: (0..size * size * 3).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn zero_biases(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_crops_give_zero_features() {
        let mut store = ParamStore::new();
        let bb = ImageBackbone::new(&mut store, &small_image(), &mut ChaCha8Rng::seed_from_u64(1));
        zero_biases(&mut store);
        let mut g = Graph::new(&store);
        let crops = vec![Grid::zeros(8, 8, 3); 3];
        for obj in bb.encode_objects(&mut g, &crops).unwrap() {
            for level in obj {
                assert!(g.value(level.var).data().iter().all(|&v| v == 0.0));
            }
        }
        let e = bb.encode_image(&mut g, &Grid::zeros(16, 16, 3)).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn object_levels_match_declared_shapes() {
        let cfg = small_image();
        let mut store = ParamStore::new();
        let bb = ImageBackbone::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new(&store);
        let a = random_grid(8, 3);
        let crops = vec![a.clone(), random_grid(8, 4), a];
        let feats = bb.encode_objects(&mut g, &crops).unwrap();
        let shapes = cfg.level_shapes(8);
        assert_eq!(shapes, vec![(8, 8, 4), (4, 4, 6)]);
        for obj in &feats {
            for (level, &(h, w, c)) in obj.iter().zip(&shapes) {
                assert_eq!(g.shape(level.var), (h * w, c));
                assert_eq!((level.height, level.width), (h, w));
            }
        }
        // identical crops give identical stacks
        for l in 0..2 {
            assert_eq!(g.value(feats[0][l].var), g.value(feats[2][l].var));
        }
    }

    #[test]
    fn rejects_wrong_crop_count_and_shape() {
        let mut store = ParamStore::new();
        let bb = ImageBackbone::new(&mut store, &small_image(), &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new(&store);
        assert!(bb.encode_objects(&mut g, &vec![Grid::zeros(8, 8, 3); 2]).is_err());
        assert!(bb.encode_objects(&mut g, &vec![Grid::zeros(9, 8, 3); 3]).is_err());
        assert!(bb.encode_image(&mut g, &Grid::zeros(8, 8, 3)).is_err());
    }

    #[test]
    fn single_pixel_perturbation_changes_image_embedding() {
        let mut store = ParamStore::new();
        let bb = ImageBackbone::new(&mut store, &small_image(), &mut ChaCha8Rng::seed_from_u64(5));
        let img = random_grid(16, 6);
        let embed = |img: &Grid| {
            let mut g = Graph::new(&store);
            let v = bb.encode_image(&mut g, img).unwrap();
            g.value(v).clone()
        };
        let base = embed(&img);
        for &(y, x) in &[(0, 0), (7, 9), (15, 15)] {
            let mut p = img.clone();
            p.pixel_mut(y, x)[1] += 1e-3;
            assert!(embed(&p).max_abs_diff(&base) > 1e-9, "pixel ({y},{x}) has no effect");
        }
    }

    #[test]
    fn backbone_weights_are_shared_between_objects_and_image() {
        let mut store = ParamStore::new();
        let bb = ImageBackbone::new(&mut store, &small_image(), &mut ChaCha8Rng::seed_from_u64(7));
        let crops = vec![random_grid(8, 8), random_grid(8, 9), random_grid(8, 10)];
        let img = random_grid(16, 11);
        let run = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let o = bb.encode_objects(&mut g, &crops).unwrap();
            let e = bb.encode_image(&mut g, &img).unwrap();
            (g.value(o[0][1].var).clone(), g.value(e).clone())
        };
        let (o1, e1) = run(&store);
        let id = store.id("image.block0.weight").unwrap();
        store.get_mut(id).data_mut()[0] += 0.5;
        let (o2, e2) = run(&store);
        assert!(o1.max_abs_diff(&o2) > 0.0);
        assert!(e1.max_abs_diff(&e2) > 0.0);
    }

    #[test]
    fn prompt_free_equivalence_with_zero_value_and_output_projection() {
        let cfg = TextEncoderConfig {
            num_layers: 1,
            ..small_text()
        };
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(12));
        for lin in [enc.value_projection(0), enc.output_projection(0)] {
            store.get_mut(lin.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tokens = [3, 7, 1, 29];
        let mut g = Graph::new(&store);
        let prompt = g.input(Tensor::zeros(1, cfg.d_model));
        let with = enc.encode(&mut g, &tokens, Some(&[prompt]), &mut ForwardCtx::eval()).unwrap();
        let without = enc.encode(&mut g, &tokens, None, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(g.shape(with), (4, cfg.d_model));
        assert!(g.value(with).max_abs_diff(g.value(without)) < 1e-12);
    }

    #[test]
    fn word_rows_only_and_prompts_reach_output() {
        let cfg = small_text();
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(13));
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut g = Graph::new(&store);
        for n in 1..=cfg.max_len {
            let tokens: Vec<usize> = (0..n).map(|i| (i * 7) % 30).collect();
            let p: Vec<Var> = (0..2).map(|_| g.input(Tensor::uniform(1, 8, 1.0, &mut rng))).collect();
            let m = enc.encode(&mut g, &tokens, Some(&p), &mut ForwardCtx::eval()).unwrap();
            assert_eq!(g.shape(m), (n, 8));
        }
        let tokens = [1, 2, 3];
        let p1: Vec<Var> = (0..2).map(|_| g.input(Tensor::uniform(1, 8, 1.0, &mut rng))).collect();
        let p2: Vec<Var> = (0..2).map(|_| g.input(Tensor::uniform(1, 8, 1.0, &mut rng))).collect();
        let a = enc.encode(&mut g, &tokens, Some(&p1), &mut ForwardCtx::eval()).unwrap();
        let b = enc.encode(&mut g, &tokens, Some(&p2), &mut ForwardCtx::eval()).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-6);
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_drops_out() {
        let cfg = small_text();
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(15));
        let tokens = [4, 5, 6, 7];
        let run = |ctx: &mut ForwardCtx| {
            let mut g = Graph::new(&store);
            let v = enc.encode(&mut g, &tokens, None, ctx).unwrap();
            g.value(v).clone()
        };
        let a = run(&mut ForwardCtx::eval());
        let b = run(&mut ForwardCtx::eval());
        assert_eq!(a, b);
        let t = run(&mut ForwardCtx::train(1));
        assert!(t.max_abs_diff(&a) > 0.0);
    }

    #[test]
    fn rejects_bad_text_inputs() {
        let cfg = small_text();
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(16));
        let mut g = Graph::new(&store);
        let mut ctx = ForwardCtx::eval();
        assert!(enc.encode(&mut g, &[], None, &mut ctx).is_err());
        assert!(enc.encode(&mut g, &[0; 11], None, &mut ctx).is_err());
        assert!(enc.encode(&mut g, &[30], None, &mut ctx).is_err());
        let p = g.input(Tensor::zeros(1, 8));
        assert!(enc.encode(&mut g, &[1], Some(&[p]), &mut ctx).is_err());
        let wide = g.input(Tensor::zeros(1, 9));
        assert!(enc.encode(&mut g, &[1], Some(&[p, wide]), &mut ctx).is_err());
    }

    #[test]
    fn gradients_wrt_prompts_match_central_differences() {
        let cfg = small_text();
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(17));
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let prompts: Vec<Tensor> = (0..2).map(|_| Tensor::uniform(1, 8, 1.0, &mut rng)).collect();
        let probe = Tensor::uniform(3, 8, 1.0, &mut rng);
        let tokens = [2, 9, 21];
        let eval = |ps: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = ps.iter().map(|p| g.input(p.clone())).collect();
            let m = enc.encode(&mut g, &tokens, Some(&vars), &mut ForwardCtx::eval()).unwrap();
            let w = g.input(probe.clone());
            let prod = g.mul(m, w);
            let loss = g.sum_all(prod);
            let grads = g.backward(loss);
            (g.scalar(loss), vars.iter().map(|&v| grads.wrt(v).unwrap().clone()).collect())
        };
        let (_, analytic) = eval(&prompts);
        let h = 1e-5;
        for l in 0..2 {
            for k in 0..8 {
                let mut plus = prompts.clone();
                plus[l].data_mut()[k] += h;
                let mut minus = prompts.clone();
                minus[l].data_mut()[k] -= h;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic[l].data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "prompt {l}[{k}]: analytic {a} numeric {numeric}");
            }
        }
    }
}
