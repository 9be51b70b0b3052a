//! Encoder/decoder network over a flat parameter vector.
//!
//! Encoder: sensor tokens (numeric features + land-cover embedding) are
//! projected to the latent width and normalized once into keys and values.
//! A learned latent array then runs `recycle_count` passes of the same
//! weights: cross-attention to the sensors (with a learned null key/value
//! row), a feed-forward block, and `n_blocks` latent self-attention blocks.
//!
//! Decoder: each query token is projected to the latent width, attends to
//! the normalized latents once, and a two-layer head reads out one scalar in
//! log10 PM2.5 space.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::layers::{gelu, gelu_grad, AttentionIdx, AttnCache, FeedForwardIdx, FfnCache, KeyValues, LayerNormIdx, Layout, LinearIdx, LnCache};
use super::linalg::{add_into, Scalar};
use crate::config::Rng;
use crate::error::{Error, Result};

/// Hidden width of every feed-forward block, as a multiple of `latent_dim`.
pub const FFN_MULT: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Numeric sensor features, excluding the embedding.
    pub sensor_width: usize,
    /// Numeric query features, excluding the embedding.
    pub query_width: usize,
    pub n_classes: usize,
    pub embed_dim: usize,
    pub latent_count: usize,
    pub latent_dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub recycle_count: usize,
}

/// A token: numeric features plus a land-cover class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub numeric: Vec<f64>,
    pub class: usize,
}

#[derive(Debug, Clone)]
struct SelfBlock {
    ln: LayerNormIdx,
    attn: AttentionIdx,
    ffn: FeedForwardIdx,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub dims: ModelDims,
    pub layout: Layout,
    embed: Range<usize>,
    enc_in: LinearIdx,
    enc_kv_ln: LayerNormIdx,
    latents: Range<usize>,
    cross_ln: LayerNormIdx,
    cross: AttentionIdx,
    cross_ffn: FeedForwardIdx,
    blocks: Vec<SelfBlock>,
    dec_in: LinearIdx,
    dec_ln_q: LayerNormIdx,
    dec_ln_z: LayerNormIdx,
    dec_attn: AttentionIdx,
    head_ln: LayerNormIdx,
    head1: LinearIdx,
    head2: LinearIdx,
}

struct BlockCache<T> {
    ln: LnCache<T>,
    zn: Vec<T>,
    kv: KeyValues<T>,
    attn: AttnCache<T>,
    ffn: FfnCache<T>,
}

struct PassCache<T> {
    ln: LnCache<T>,
    attn: AttnCache<T>,
    ffn: FfnCache<T>,
    blocks: Vec<BlockCache<T>>,
}

/// Everything the encoder backward pass needs.
pub struct EncoderCache<T> {
    x0: Vec<T>,
    classes: Vec<usize>,
    n: usize,
    kv_ln: LnCache<T>,
    hn: Vec<T>,
    kv: KeyValues<T>,
    passes: Vec<PassCache<T>>,
}

/// Normalized latents projected to decoder keys and values; shared by all
/// queries decoded against one latent array.
pub struct DecoderContext<T> {
    ln: LnCache<T>,
    zn: Vec<T>,
    kv: KeyValues<T>,
}

pub struct DecoderCache<T> {
    x0: Vec<T>,
    class: usize,
    ln_q: LnCache<T>,
    attn: AttnCache<T>,
    head_ln: LnCache<T>,
    hn: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

fn to_t<T: Scalar>(v: &[f64]) -> impl Iterator<Item = T> + '_ {
    v.iter().map(|&x| T::c(x))
}

impl Network {
    pub fn new(dims: ModelDims) -> Result<Self> {
        if dims.latent_dim == 0 || dims.n_heads == 0 || dims.latent_dim % dims.n_heads != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} must be a positive multiple of n_heads {}",
                dims.latent_dim, dims.n_heads
            )));
        }
        if dims.n_classes == 0 || dims.latent_count == 0 || dims.recycle_count == 0 {
            return Err(Error::Config("n_classes, latent_count and recycle_count must be positive".into()));
        }
        let d = dims.latent_dim;
        let hidden = FFN_MULT * d;
        let mut l = Layout::default();
        let embed = l.add("embed", &[dims.n_classes, dims.embed_dim]);
        let enc_in = LinearIdx::new(&mut l, "enc.in", dims.sensor_width + dims.embed_dim, d);
        let enc_kv_ln = LayerNormIdx::new(&mut l, "enc.kv_ln", d);
        let latents = l.add("enc.latents", &[dims.latent_count, d]);
        let cross_ln = LayerNormIdx::new(&mut l, "enc.cross.ln", d);
        let cross = AttentionIdx::new(&mut l, "enc.cross.attn", d, dims.n_heads, true);
        let cross_ffn = FeedForwardIdx::new(&mut l, "enc.cross.ffn", d, hidden);
        let blocks = (0..dims.n_blocks)
            .map(|b| SelfBlock {
                ln: LayerNormIdx::new(&mut l, &format!("enc.block{b}.ln"), d),
                attn: AttentionIdx::new(&mut l, &format!("enc.block{b}.attn"), d, dims.n_heads, false),
                ffn: FeedForwardIdx::new(&mut l, &format!("enc.block{b}.ffn"), d, hidden),
            })
            .collect();
        let dec_in = LinearIdx::new(&mut l, "dec.in", dims.query_width + dims.embed_dim, d);
        let dec_ln_q = LayerNormIdx::new(&mut l, "dec.ln_q", d);
        let dec_ln_z = LayerNormIdx::new(&mut l, "dec.ln_z", d);
        let dec_attn = AttentionIdx::new(&mut l, "dec.attn", d, dims.n_heads, false);
        let head_ln = LayerNormIdx::new(&mut l, "dec.head.ln", d);
        let head1 = LinearIdx::new(&mut l, "dec.head.fc1", d, hidden);
        let head2 = LinearIdx::new(&mut l, "dec.head.fc2", hidden, 1);
        Ok(Network {
            dims,
            layout: l,
            embed,
            enc_in,
            enc_kv_ln,
            latents,
            cross_ln,
            cross,
            cross_ffn,
            blocks,
            dec_in,
            dec_ln_q,
            dec_ln_z,
            dec_attn,
            head_ln,
            head1,
            head2,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// Range of the scalar output bias.
    pub fn output_bias(&self) -> Range<usize> {
        self.head2.b.clone()
    }

    /// Range of one embedding row.
    pub fn embedding_row(&self, class: usize) -> Range<usize> {
        let e = self.dims.embed_dim;
        self.embed.start + class * e..self.embed.start + (class + 1) * e
    }

    /// Uniform fan-in initialization; biases and null rows start at zero,
    /// layer-norm gains at one.
    pub fn init_params(&self, rng: &mut Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.layout.total];
        for t in &self.layout.tensors {
            let r = t.range();
            let name = t.name.as_str();
            if name.ends_with(".g") {
                p[r].fill(1.0);
            } else if name.ends_with(".w") {
                let bound = 1.0 / (t.shape[0] as f64).sqrt();
                let bound = if name == "dec.head.fc2.w" { 0.1 * bound } else { bound };
                for v in &mut p[r] {
                    *v = rng.gen_range(-bound..bound);
                }
            } else if name == "embed" || name == "enc.latents" {
                for v in &mut p[r] {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
        }
        p
    }

    fn check_token(&self, t: &Token, width: usize, what: &str) -> Result<()> {
        if t.numeric.len() != width {
            return Err(Error::Shape(format!("{what} token has {} features, expected {width}", t.numeric.len())));
        }
        if t.class >= self.dims.n_classes {
            return Err(Error::Shape(format!(
                "{what} token class {} outside embedding table of {}",
                t.class, self.dims.n_classes
            )));
        }
        Ok(())
    }

    fn token_input<T: Scalar>(&self, p: &[T], t: &Token, out: &mut Vec<T>) {
        out.extend(to_t::<T>(&t.numeric));
        out.extend_from_slice(&p[self.embedding_row(t.class)]);
    }

    pub fn encode<T: Scalar>(&self, p: &[T], tokens: &[Token]) -> Result<(Vec<T>, EncoderCache<T>)> {
        if tokens.is_empty() {
            return Err(Error::Shape("encoder needs at least one sensor token".into()));
        }
        let n = tokens.len();
        let width = self.dims.sensor_width + self.dims.embed_dim;
        let mut x0 = Vec::with_capacity(n * width);
        for t in tokens {
            self.check_token(t, self.dims.sensor_width, "sensor")?;
            self.token_input(p, t, &mut x0);
        }
        let h = self.enc_in.forward(p, &x0, n);
        let (hn, kv_ln) = self.enc_kv_ln.forward(p, &h, n);
        let kv = self.cross.project_kv(p, &hn, n);

        let l = self.dims.latent_count;
        let mut z = p[self.latents.clone()].to_vec();
        let mut passes = Vec::with_capacity(self.dims.recycle_count);
        for _ in 0..self.dims.recycle_count {
            let (zn, ln) = self.cross_ln.forward(p, &z, l);
            let (a, attn) = self.cross.attend(p, &zn, l, &kv);
            add_into(&mut z, &a);
            let (z2, ffn) = self.cross_ffn.forward(p, &z, l);
            z = z2;
            let mut blocks = Vec::with_capacity(self.blocks.len());
            for b in &self.blocks {
                let (zn, ln) = b.ln.forward(p, &z, l);
                let kv = b.attn.project_kv(p, &zn, l);
                let (a, attn) = b.attn.attend(p, &zn, l, &kv);
                add_into(&mut z, &a);
                let (z2, ffn) = b.ffn.forward(p, &z, l);
                z = z2;
                blocks.push(BlockCache { ln, zn, kv, attn, ffn });
            }
            passes.push(PassCache { ln, attn, ffn, blocks });
        }
        let classes = tokens.iter().map(|t| t.class).collect();
        Ok((
            z,
            EncoderCache {
                x0,
                classes,
                n,
                kv_ln,
                hn,
                kv,
                passes,
            },
        ))
    }

    pub fn encode_backward<T: Scalar>(&self, p: &[T], g: &mut [T], c: &EncoderCache<T>, dz: Vec<T>) {
        let d = self.dims.latent_dim;
        let mut dz = dz;
        let mut dk = vec![T::zero(); c.kv.nk * d];
        let mut dv = vec![T::zero(); c.kv.nk * d];
        for pass in c.passes.iter().rev() {
            for (b, bc) in self.blocks.iter().zip(&pass.blocks).rev() {
                dz = b.ffn.backward(p, g, &bc.ffn, &dz);
                let mut bdk = vec![T::zero(); bc.kv.nk * d];
                let mut bdv = vec![T::zero(); bc.kv.nk * d];
                let mut dzn = b.attn.attend_backward(p, g, &bc.attn, &bc.kv, &dz, &mut bdk, &mut bdv);
                let dzn_kv = b.attn.project_kv_backward(p, g, &bc.zn, &bc.kv, &bdk, &bdv);
                add_into(&mut dzn, &dzn_kv);
                let dln = b.ln.backward(p, g, &bc.ln, &dzn);
                add_into(&mut dz, &dln);
            }
            dz = self.cross_ffn.backward(p, g, &pass.ffn, &dz);
            let dzn = self.cross.attend_backward(p, g, &pass.attn, &c.kv, &dz, &mut dk, &mut dv);
            let dln = self.cross_ln.backward(p, g, &pass.ln, &dzn);
            add_into(&mut dz, &dln);
        }
        add_into(&mut g[self.latents.clone()], &dz);
        let dhn = self.cross.project_kv_backward(p, g, &c.hn, &c.kv, &dk, &dv);
        let dh = self.enc_kv_ln.backward(p, g, &c.kv_ln, &dhn);
        let dx0 = self.enc_in.backward(p, g, &c.x0, c.n, &dh, true);
        let width = self.dims.sensor_width + self.dims.embed_dim;
        for (i, &class) in c.classes.iter().enumerate() {
            let row = self.embedding_row(class);
            add_into(&mut g[row], &dx0[i * width + self.dims.sensor_width..(i + 1) * width]);
        }
    }

    pub fn decoder_context<T: Scalar>(&self, p: &[T], z: &[T]) -> DecoderContext<T> {
        let l = self.dims.latent_count;
        let (zn, ln) = self.dec_ln_z.forward(p, z, l);
        let kv = self.dec_attn.project_kv(p, &zn, l);
        DecoderContext { ln, zn, kv }
    }

    pub fn decode<T: Scalar>(&self, p: &[T], ctx: &DecoderContext<T>, query: &Token) -> Result<(T, DecoderCache<T>)> {
        self.check_token(query, self.dims.query_width, "query")?;
        let mut x0 = Vec::with_capacity(self.dims.query_width + self.dims.embed_dim);
        self.token_input(p, query, &mut x0);
        let hq = self.dec_in.forward(p, &x0, 1);
        let (qn, ln_q) = self.dec_ln_q.forward(p, &hq, 1);
        let (a, attn) = self.dec_attn.attend(p, &qn, 1, &ctx.kv);
        let mut h = hq;
        add_into(&mut h, &a);
        let (hn, head_ln) = self.head_ln.forward(p, &h, 1);
        let pre = self.head1.forward(p, &hn, 1);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.head2.forward(p, &act, 1)[0];
        Ok((
            y,
            DecoderCache {
                x0,
                class: query.class,
                ln_q,
                attn,
                head_ln,
                hn,
                pre,
                act,
            },
        ))
    }

    /// Backward of one decode; key/value gradients land in `dk`/`dv`, which
    /// [`Network::decoder_context_backward`] turns into latent gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_backward<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        ctx: &DecoderContext<T>,
        c: &DecoderCache<T>,
        dy: T,
        dk: &mut [T],
        dv: &mut [T],
    ) {
        let dact = self.head2.backward(p, g, &c.act, 1, &[dy], true);
        let dpre: Vec<T> = dact.iter().zip(&c.pre).map(|(&d, &x)| d * gelu_grad(x)).collect();
        let dhn = self.head1.backward(p, g, &c.hn, 1, &dpre, true);
        let dh = self.head_ln.backward(p, g, &c.head_ln, &dhn);
        let dqn = self.dec_attn.attend_backward(p, g, &c.attn, &ctx.kv, &dh, dk, dv);
        let mut dhq = self.dec_ln_q.backward(p, g, &c.ln_q, &dqn);
        add_into(&mut dhq, &dh);
        let dx0 = self.dec_in.backward(p, g, &c.x0, 1, &dhq, true);
        let row = self.embedding_row(c.class);
        add_into(&mut g[row], &dx0[self.dims.query_width..]);
    }

    pub fn decoder_context_backward<T: Scalar>(&self, p: &[T], g: &mut [T], ctx: &DecoderContext<T>, dk: &[T], dv: &[T]) -> Vec<T> {
        let dzn = self.dec_attn.project_kv_backward(p, g, &ctx.zn, &ctx.kv, dk, dv);
        self.dec_ln_z.backward(p, g, &ctx.ln, &dzn)
    }

    /// Output for one query given its sensors, in log10 space.
    pub fn forward<T: Scalar>(&self, p: &[T], sensors: &[Token], query: &Token) -> Result<T> {
        let (z, _) = self.encode(p, sensors)?;
        let ctx = self.decoder_context(p, &z);
        Ok(self.decode(p, &ctx, query)?.0)
    }

    /// Outputs for several queries sharing one sensor set; each query is
    /// decoded on its own.
    pub fn forward_many<T: Scalar>(&self, p: &[T], sensors: &[Token], queries: &[Token]) -> Result<Vec<T>> {
        let (z, _) = self.encode(p, sensors)?;
        let ctx = self.decoder_context(p, &z);
        queries.iter().map(|q| self.decode(p, &ctx, q).map(|r| r.0)).collect()
    }

    /// Forward and backward for one example; adds `scale · ∂ŷ/∂θ` to `g` and
    /// returns the prediction.
    pub fn backprop_output<T: Scalar>(&self, p: &[T], g: &mut [T], sensors: &[Token], query: &Token, scale: impl Fn(T) -> T) -> Result<T> {
        let (z, enc) = self.encode(p, sensors)?;
        let ctx = self.decoder_context(p, &z);
        let (y, dec) = self.decode(p, &ctx, query)?;
        let dy = scale(y);
        let d = self.dims.latent_dim;
        let mut dk = vec![T::zero(); ctx.kv.nk * d];
        let mut dv = vec![T::zero(); ctx.kv.nk * d];
        self.decode_backward(p, g, &ctx, &dec, dy, &mut dk, &mut dv);
        let dz = self.decoder_context_backward(p, g, &ctx, &dk, &dv);
        self.encode_backward(p, g, &enc, dz);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::seeded_rng;

    pub(crate) fn tiny_dims() -> ModelDims {
        ModelDims {
            sensor_width: 5,
            query_width: 3,
            n_classes: 3,
            embed_dim: 2,
            latent_count: 4,
            latent_dim: 8,
            n_heads: 2,
            n_blocks: 1,
            recycle_count: 2,
        }
    }

    fn token(rng: &mut Rng, width: usize, classes: usize) -> Token {
        Token {
            numeric: (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            class: rng.gen_range(0..classes),
        }
    }

    #[test]
    fn parameter_count_ignores_sensor_count() {
        let net = Network::new(tiny_dims()).unwrap();
        let p = net.init_params(&mut seeded_rng(1));
        let mut rng = seeded_rng(2);
        let q = token(&mut rng, 3, 3);
        for n in [4, 64] {
            let s: Vec<Token> = (0..n).map(|_| token(&mut rng, 5, 3)).collect();
            assert!(net.forward(&p, &s, &q).unwrap().is_finite());
        }
        assert_eq!(p.len(), net.n_params());
    }

    #[test]
    fn zero_params_give_finite_output() {
        let net = Network::new(tiny_dims()).unwrap();
        let p = vec![0.0f64; net.n_params()];
        let mut rng = seeded_rng(3);
        let s: Vec<Token> = (0..6).map(|_| token(&mut rng, 5, 3)).collect();
        let y = net.forward(&p, &s, &token(&mut rng, 3, 3)).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let net = Network::new(tiny_dims()).unwrap();
        let mut p = net.init_params(&mut seeded_rng(4));
        let mut rng = seeded_rng(5);
        let s: Vec<Token> = (0..5).map(|_| token(&mut rng, 5, 3)).collect();
        let q = token(&mut rng, 3, 3);
        let mut g = vec![0.0; p.len()];
        net.backprop_output(&p, &mut g, &s, &q, |_| 1.0).unwrap();
        let h = 1e-4;
        let f = |p: &mut Vec<f64>, i: usize, x: f64| {
            let orig = p[i];
            p[i] = x;
            let y = net.forward(p, &s, &q).unwrap();
            p[i] = orig;
            y
        };
        for i in (0..p.len()).step_by(7) {
            let x = p[i];
            // five-point stencil
            let fd = (-f(&mut p, i, x + 2.0 * h) + 8.0 * f(&mut p, i, x + h) - 8.0 * f(&mut p, i, x - h)
                + f(&mut p, i, x - 2.0 * h))
                / (12.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(err < 1e-6, "param {i} ({fd} vs {})", g[i]);
        }
    }
}
