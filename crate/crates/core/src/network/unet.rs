//! Encoder-decoder backbone with skip connections.
//!
//! Level `l` works at `1/2^l` resolution with `base * 2^l` filters. Each
//! encoder level is two 3x3 conv + ReLU; levels are linked by 2x2 max
//! pooling. Each decoder level up-samples with a 2x2 transposed conv + ReLU,
//! concatenates the skip features and applies two 3x3 conv + ReLU. A 1x1
//! head produces the logits.

use super::ops::{self, Dims, Real};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Conv { k: usize },
    UpConv,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    kind: Kind,
    c_in: usize,
    c_out: usize,
    weight: usize,
    bias: usize,
}

impl Layer {
    fn weight_len(&self) -> usize {
        match self.kind {
            Kind::Conv { k } => self.c_out * self.c_in * k * k,
            Kind::UpConv => self.c_out * 4 * self.c_in,
        }
    }
}

/// Layer plan of a U-Net; independent of the scalar type.
#[derive(Debug, Clone)]
pub struct UNet {
    in_channels: usize,
    out_channels: usize,
    depth: usize,
    encoder: Vec<(Layer, Layer)>,
    decoder: Vec<(Layer, Layer, Layer)>,
    head: Layer,
    specs: Vec<ParamSpec>,
    n_params: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
    offset: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.offset;
        self.specs.push(ParamSpec {
            name,
            shape,
            offset,
            len,
        });
        self.offset += len;
        offset
    }

    fn layer(&mut self, name: &str, kind: Kind, c_in: usize, c_out: usize) -> Layer {
        let shape = match kind {
            Kind::Conv { k } => vec![c_out, c_in, k, k],
            Kind::UpConv => vec![c_out, 2, 2, c_in],
        };
        let weight = self.push(format!("{name}.weight"), shape);
        let bias = self.push(format!("{name}.bias"), vec![c_out]);
        Layer {
            kind,
            c_in,
            c_out,
            weight,
            bias,
        }
    }
}

/// Activations kept by the forward pass for backpropagation.
pub struct Cache<T> {
    input_dims: Dims,
    enc: Vec<EncCache<T>>,
    dec: Vec<DecCache<T>>,
    head_col: Vec<T>,
}

struct EncCache<T> {
    dims_in: Dims,
    col1: Vec<T>,
    act1: Vec<T>,
    col2: Vec<T>,
    act2: Vec<T>,
    pool_arg: Vec<u32>,
}

struct DecCache<T> {
    dims_low: Dims,
    up_in: Vec<T>,
    up_act: Vec<T>,
    col1: Vec<T>,
    act1: Vec<T>,
    col2: Vec<T>,
    act2: Vec<T>,
}

impl UNet {
    pub fn new(in_channels: usize, out_channels: usize, depth: usize, base: usize) -> Self {
        let mut b = Builder {
            specs: Vec::new(),
            offset: 0,
        };
        let ch = |l: usize| base << l;
        let k3 = Kind::Conv { k: 3 };
        let mut encoder = Vec::with_capacity(depth);
        for l in 0..depth {
            let c_in = if l == 0 { in_channels } else { ch(l - 1) };
            let a = b.layer(&format!("enc{l}.conv1"), k3, c_in, ch(l));
            let c = b.layer(&format!("enc{l}.conv2"), k3, ch(l), ch(l));
            encoder.push((a, c));
        }
        let mut decoder = Vec::with_capacity(depth.saturating_sub(1));
        for l in (0..depth.saturating_sub(1)).rev() {
            let up = b.layer(&format!("dec{l}.up"), Kind::UpConv, ch(l + 1), ch(l));
            let a = b.layer(&format!("dec{l}.conv1"), k3, 2 * ch(l), ch(l));
            let c = b.layer(&format!("dec{l}.conv2"), k3, ch(l), ch(l));
            decoder.push((up, a, c));
        }
        let head = b.layer("head", Kind::Conv { k: 1 }, ch(0), out_channels);
        Self {
            in_channels,
            out_channels,
            depth,
            encoder,
            decoder,
            head,
            n_params: b.offset,
            specs: b.specs,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// He-style initial scale of each parameter tensor's entries (0 for biases).
    pub(crate) fn init_std(&self) -> Vec<(ParamSpec, f64)> {
        let mut out = Vec::new();
        let mut push = |layer: &Layer, gain: f64| {
            let fan_in = match layer.kind {
                Kind::Conv { k } => layer.c_in * k * k,
                Kind::UpConv => layer.c_in,
            };
            let w = self.specs.iter().find(|s| s.offset == layer.weight).unwrap().clone();
            let b = self.specs.iter().find(|s| s.offset == layer.bias).unwrap().clone();
            out.push((w, (gain / fan_in as f64).sqrt()));
            out.push((b, 0.0));
        };
        for (a, c) in &self.encoder {
            push(a, 2.0);
            push(c, 2.0);
        }
        for (u, a, c) in &self.decoder {
            push(u, 2.0);
            push(a, 2.0);
            push(c, 2.0);
        }
        push(&self.head, 1.0);
        out.sort_by_key(|(s, _)| s.offset);
        out
    }

    fn conv<T: Real>(&self, p: &[T], layer: &Layer, x: &[T], d: Dims, col: &mut Vec<T>) -> Vec<T> {
        let k = match layer.kind {
            Kind::Conv { k } => k,
            Kind::UpConv => unreachable!("not a conv layer"),
        };
        ops::conv_forward(
            x,
            d,
            layer.c_out,
            k,
            &p[layer.weight..layer.weight + layer.weight_len()],
            &p[layer.bias..layer.bias + layer.c_out],
            col,
        )
    }

    /// Forward pass on one `in_channels x h x w` input; returns logits and the cache.
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], h: usize, w: usize) -> (Vec<T>, Cache<T>) {
        assert_eq!(p.len(), self.n_params, "parameter vector length");
        assert_eq!(x.len(), self.in_channels * h * w, "input length");
        let input_dims = Dims::new(self.in_channels, h, w);
        let mut enc = Vec::with_capacity(self.depth);
        let mut cur = x.to_vec();
        let mut d = input_dims;
        for (l, (a, c)) in self.encoder.iter().enumerate() {
            let mut col1 = Vec::new();
            let mut act1 = self.conv(p, a, &cur, d, &mut col1);
            ops::relu_inplace(&mut act1);
            let d1 = Dims::new(a.c_out, d.h, d.w);
            let mut col2 = Vec::new();
            let mut act2 = self.conv(p, c, &act1, d1, &mut col2);
            ops::relu_inplace(&mut act2);
            let d2 = Dims::new(c.c_out, d.h, d.w);
            let (next, pool_arg) = if l + 1 < self.depth {
                let (pooled, arg) = ops::maxpool_forward(&act2, d2);
                (pooled, arg)
            } else {
                (act2.clone(), Vec::new())
            };
            enc.push(EncCache {
                dims_in: d,
                col1,
                act1,
                col2,
                act2,
                pool_arg,
            });
            cur = next;
            d = if l + 1 < self.depth {
                Dims::new(c.c_out, d.h / 2, d.w / 2)
            } else {
                d2
            };
        }
        let mut dec = Vec::with_capacity(self.decoder.len());
        for (up, a, c) in &self.decoder {
            let l = self.depth - 2 - dec.len();
            let dims_low = d;
            let up_in = std::mem::take(&mut cur);
            let mut up_act = ops::upconv_forward(
                &up_in,
                dims_low,
                up.c_out,
                &p[up.weight..up.weight + up.weight_len()],
                &p[up.bias..up.bias + up.c_out],
            );
            ops::relu_inplace(&mut up_act);
            let skip = &enc[l].act2;
            let hi = Dims::new(2 * up.c_out, dims_low.h * 2, dims_low.w * 2);
            let mut cat = Vec::with_capacity(hi.len());
            cat.extend_from_slice(skip);
            cat.extend_from_slice(&up_act);
            let mut col1 = Vec::new();
            let mut act1 = self.conv(p, a, &cat, hi, &mut col1);
            ops::relu_inplace(&mut act1);
            let d1 = Dims::new(a.c_out, hi.h, hi.w);
            let mut col2 = Vec::new();
            let mut act2 = self.conv(p, c, &act1, d1, &mut col2);
            ops::relu_inplace(&mut act2);
            d = Dims::new(c.c_out, hi.h, hi.w);
            cur = act2.clone();
            dec.push(DecCache {
                dims_low,
                up_in,
                up_act,
                col1,
                act1,
                col2,
                act2,
            });
        }
        let mut head_col = Vec::new();
        let logits = self.conv(p, &self.head, &cur, d, &mut head_col);
        (
            logits,
            Cache {
                input_dims,
                enc,
                dec,
                head_col,
            },
        )
    }

    /// Backward pass from the logit gradient.
    ///
    /// Parameter gradients are accumulated into `grads` when given (same
    /// layout as the parameters); the input gradient is returned when
    /// `want_input_grad` is set.
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        cache: &Cache<T>,
        d_logits: &[T],
        mut grads: Option<&mut [T]>,
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let (h, w) = (cache.input_dims.h, cache.input_dims.w);
        let top = Dims::new(self.head.c_in, h, w);
        let mut g = self.conv_back(p, &self.head, d_logits, top, &cache.head_col, grads.as_deref_mut(), true)
            .expect("input grad requested");
        // gradient flowing into each encoder level's output through skips
        let mut skip_grads: Vec<Option<Vec<T>>> = vec![None; self.depth];
        for (i, (up, a, c)) in self.decoder.iter().enumerate().rev() {
            let l = self.depth - 2 - i;
            let dc = &cache.dec[i];
            let hi_c = Dims::new(c.c_in, dc.dims_low.h * 2, dc.dims_low.w * 2);
            ops::relu_backward(&dc.act2, &mut g);
            let mut g1 = self
                .conv_back(p, c, &g, hi_c, &dc.col2, grads.as_deref_mut(), true)
                .unwrap();
            ops::relu_backward(&dc.act1, &mut g1);
            let hi_a = Dims::new(a.c_in, hi_c.h, hi_c.w);
            let gcat = self
                .conv_back(p, a, &g1, hi_a, &dc.col1, grads.as_deref_mut(), true)
                .unwrap();
            let split = up.c_out * hi_c.h * hi_c.w;
            skip_grads[l] = Some(gcat[..split].to_vec());
            let mut gup = gcat[split..].to_vec();
            ops::relu_backward(&dc.up_act, &mut gup);
            let wts = &p[up.weight..up.weight + up.weight_len()];
            let ug = grads.as_deref_mut().map(|gr| split_pair(gr, up));
            g = ops::upconv_backward(&gup, &dc.up_in, dc.dims_low, up.c_out, wts, ug, true).unwrap();
        }
        for (l, (a, c)) in self.encoder.iter().enumerate().rev() {
            let ec = &cache.enc[l];
            let d = ec.dims_in;
            let d2 = Dims::new(c.c_out, d.h, d.w);
            // g currently holds the gradient w.r.t. this level's output (pooled or not)
            let mut g2 = if l + 1 < self.depth {
                ops::maxpool_backward(&g, &ec.pool_arg, d2.len())
            } else {
                g
            };
            if let Some(s) = skip_grads[l].take() {
                for (a, b) in g2.iter_mut().zip(s) {
                    *a += b;
                }
            }
            ops::relu_backward(&ec.act2, &mut g2);
            let d1 = Dims::new(c.c_in, d.h, d.w);
            let mut g1 = self
                .conv_back(p, c, &g2, d1, &ec.col2, grads.as_deref_mut(), true)
                .unwrap();
            ops::relu_backward(&ec.act1, &mut g1);
            let need = l > 0 || want_input_grad;
            {
                let next = self.conv_back(p, a, &g1, d, &ec.col1, grads.as_deref_mut(), need)?;
                g = next
            }
        }
        if want_input_grad {
            Some(g)
        } else {
            None
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_back<T: Real>(
        &self,
        p: &[T],
        layer: &Layer,
        dy: &[T],
        d_in: Dims,
        col: &[T],
        grads: Option<&mut [T]>,
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let k = match layer.kind {
            Kind::Conv { k } => k,
            Kind::UpConv => unreachable!("not a conv layer"),
        };
        let wts = &p[layer.weight..layer.weight + layer.weight_len()];
        let g = grads.map(|gr| split_pair(gr, layer));
        ops::conv_backward(dy, d_in, layer.c_out, k, wts, col, g, want_dx)
    }
}

/// Disjoint mutable views of a layer's weight and bias gradients.
fn split_pair<'a, T>(grads: &'a mut [T], layer: &Layer) -> (&'a mut [T], &'a mut [T]) {
    // weight block always precedes its bias block
    let (head, tail) = grads.split_at_mut(layer.bias);
    (
        &mut head[layer.weight..layer.weight + layer.weight_len()],
        &mut tail[..layer.c_out],
    )
}
