//! Configurable 2D U-net with same-padded 3x3 convolutions, 2x2 max
//! pooling, nearest-neighbour upsampling, skip concatenation and a 1x1
//! sigmoid head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of 2x2 pooling steps.
    pub depth: usize,
    /// Channels of the first block; doubled at every level down.
    pub base_channels: usize,
    pub in_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 8,
            in_channels: 1,
        }
    }
}

impl UNetConfig {
    pub fn new(depth: usize, base_channels: usize) -> Result<Self> {
        let c = UNetConfig {
            depth,
            base_channels,
            in_channels: 1,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!(
                "U-net needs depth, base_channels and in_channels >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Channels at level `l` (level `depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be multiples of this; inputs are padded to it.
    pub fn granule(&self) -> usize {
        1 << self.depth
    }
}

/// Number of trainable scalars of the configured network.
pub fn param_count(cfg: &UNetConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
    let block = |cin: usize, cout: usize| conv(cin, cout, 3) + conv(cout, cout, 3);
    let ch = |l: usize| cfg.channels(l);
    let mut n = 0;
    for l in 0..cfg.depth {
        let cin = if l == 0 { cfg.in_channels } else { ch(l - 1) };
        n += block(cin, ch(l));
    }
    n += block(ch(cfg.depth - 1), ch(cfg.depth));
    for l in 0..cfg.depth {
        n += block(ch(l + 1) + ch(l), ch(l));
    }
    n + conv(ch(0), 1, 1)
}

#[derive(Debug, Clone)]
struct ConvSpec {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
}

fn layer_plan(cfg: &UNetConfig) -> Vec<ConvSpec> {
    let mut plan = Vec::new();
    let mut block = |name: &str, cin: usize, cout: usize| {
        plan.push(ConvSpec {
            name: format!("{name}.conv1"),
            cin,
            cout,
            k: 3,
        });
        plan.push(ConvSpec {
            name: format!("{name}.conv2"),
            cin: cout,
            cout,
            k: 3,
        });
    };
    for l in 0..cfg.depth {
        let cin = if l == 0 {
            cfg.in_channels
        } else {
            cfg.channels(l - 1)
        };
        block(&format!("down{l}"), cin, cfg.channels(l));
    }
    block(
        "bottleneck",
        cfg.channels(cfg.depth - 1),
        cfg.channels(cfg.depth),
    );
    for l in (0..cfg.depth).rev() {
        block(
            &format!("up{l}"),
            cfg.channels(l + 1) + cfg.channels(l),
            cfg.channels(l),
        );
    }
    plan.push(ConvSpec {
        name: "head".into(),
        cin: cfg.channels(0),
        cout: 1,
        k: 1,
    });
    plan
}

/// Parameters of a U-net: a weight and a bias per convolution, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetModel<T = f32> {
    config: UNetConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> UNetModel<T> {
    /// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases, reproducible from `seed`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for spec in layer_plan(&config) {
            let fan_in = spec.cin * spec.k * spec.k;
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = spec.cout * spec.cin * spec.k * spec.k;
            let w: Vec<T> = (0..n)
                .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            params.push(
                Tensor::from_vec([spec.cout, spec.cin, spec.k, spec.k], w)
                    .expect("planned shape")
                    .requiring_grad(),
            );
            names.push(format!("{}.weight", spec.name));
            params.push(Tensor::zeros([spec.cout]).requiring_grad());
            names.push(format!("{}.bias", spec.name));
        }
        Ok(UNetModel {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Places the parameters into `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p)
                } else {
                    g.constant(p.shape().clone(), p.values().to_vec())
                        .expect("parameter shape is consistent")
                }
            })
            .collect()
    }

    /// Runs the network on a `[H, W]` image node. Extents that are not
    /// multiples of `2^depth` are zero-padded and cropped back.
    pub fn forward(&self, g: &mut Graph<T>, params: &[Var], image: Var) -> Result<Var> {
        let d = g.shape(image).to_vec();
        if d.len() != 2 {
            return Err(Error::invalid(
                "unet_forward",
                &d,
                "expected an image [H,W]",
            ));
        }
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "unet_forward",
                &[params.len()],
                &[self.params.len()],
            ));
        }
        let (h, w) = (d[0], d[1]);
        let gr = self.config.granule();
        let (hp, wp) = (h.div_ceil(gr) * gr, w.div_ceil(gr) * gr);
        let mut x = g.reshape(image, &[1, h, w])?;
        if (hp, wp) != (h, w) {
            x = g.pad2d(x, hp, wp)?;
        }
        let mut p = params.chunks_exact(2);
        let mut conv_relu = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            let wb = p.next().expect("layer plan and params agree");
            let y = g.conv2d(x, wb[0], wb[1], Padding::Same)?;
            Ok(g.relu(y))
        };
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            x = conv_relu(g, x)?;
            x = conv_relu(g, x)?;
            skips.push(x);
            x = g.maxpool2d(x)?;
        }
        x = conv_relu(g, x)?;
        x = conv_relu(g, x)?;
        while let Some(skip) = skips.pop() {
            let up = g.upsample2d(x)?;
            x = g.concat_channels(skip, up)?;
            x = conv_relu(g, x)?;
            x = conv_relu(g, x)?;
        }
        let head = &params[params.len() - 2..];
        let logits = g.conv2d(x, head[0], head[1], Padding::Same)?;
        let mut y = g.sigmoid(logits);
        if (hp, wp) != (h, w) {
            y = g.crop2d(y, h, w)?;
        }
        g.reshape(y, &[h, w])
    }

    /// Forward pass outside of any training graph.
    pub fn predict(&self, image: &Image<T>) -> Result<Image<T>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(image.dims(), image.data().to_vec())?;
        let y = self.forward(&mut g, &params, x)?;
        Image::new(image.dims(), g.value(y).to_vec())
    }
}
