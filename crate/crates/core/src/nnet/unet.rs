use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::loss::{objective, LossParts};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::imagecore::{BinaryMask, RngStream};

/// How decoder levels upsample before their skip concatenation. Only
/// nearest-neighbour upsampling followed by a 3x3 convolution exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpMode {
    #[default]
    NearestConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Number of resolution levels, including the bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    pub up_mode: UpMode,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 2,
            depth: 3,
            base_channels: 8,
            up_mode: UpMode::NearestConv,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.in_channels) {
            return Err(Error::invalid(format!(
                "in_channels must be 1 or 2, got {}",
                self.in_channels
            )));
        }
        if !(1..=8).contains(&self.depth) {
            return Err(Error::invalid(format!(
                "depth must be in 1..=8, got {}",
                self.depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels must be positive"));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(name, weight shape)` of every convolution, in parameter order.
    /// Each convolution contributes a weight block then a bias block.
    fn layout(&self) -> Vec<(String, [usize; 4])> {
        let mut convs = Vec::new();
        let mut cin = self.in_channels;
        for l in 0..self.depth {
            let c = self.channels(l);
            convs.push((format!("enc{l}.conv1"), [c, cin, 3, 3]));
            convs.push((format!("enc{l}.conv2"), [c, c, 3, 3]));
            cin = c;
        }
        for l in (0..self.depth.saturating_sub(1)).rev() {
            let c = self.channels(l);
            convs.push((format!("dec{l}.up"), [c, self.channels(l + 1), 3, 3]));
            convs.push((format!("dec{l}.conv1"), [c, 2 * c, 3, 3]));
            convs.push((format!("dec{l}.conv2"), [c, c, 3, 3]));
        }
        convs.push(("head".to_string(), [1, self.base_channels, 1, 1]));
        convs
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layout()
            .into_iter()
            .flat_map(|(name, _)| [format!("{name}.weight"), format!("{name}.bias")])
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<[usize; 4]> {
        self.layout()
            .into_iter()
            .flat_map(|(_, s)| [s, [1, 1, 1, s[0]]])
            .collect()
    }
}

/// Encoder-decoder network with skip connections; parameters are stored as
/// alternating weight and bias tensors in [`UNetConfig::param_names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<S: Scalar> {
    pub config: UNetConfig,
    pub params: Vec<Tensor<S>>,
}

impl<S: Scalar> UNet<S> {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
    pub fn init(config: &UNetConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let mut t = Tensor::zeros(shape);
                if i % 2 == 0 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    for v in t.data_mut() {
                        *v = S::from_f64(rng.uniform_range(-bound, bound));
                    }
                }
                t
            })
            .collect();
        Ok(UNet {
            config: config.clone(),
            params,
        })
    }

    pub fn zeros(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(Tensor::zeros)
            .collect();
        Ok(UNet {
            config: config.clone(),
            params,
        })
    }

    pub fn from_params(config: &UNetConfig, params: Vec<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| *s != p.shape())
        {
            return Err(Error::DimensionMismatch(
                "parameter shapes do not match the network layout".into(),
            ));
        }
        Ok(UNet {
            config: config.clone(),
            params,
        })
    }

    pub fn cast<T: Scalar>(&self) -> UNet<T> {
        UNet {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub(crate) fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != self.config.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::DimensionMismatch(format!(
                "spatial dims not divisible by {d}: {w}x{h}"
            )));
        }
        Ok(())
    }

    /// Records the network on `g` and returns the pre-sigmoid logits node.
    pub(crate) fn logits(&self, g: &mut Graph<'_, S>, x: NodeId) -> NodeId {
        let mut p = 0;
        let mut conv_relu = |g: &mut Graph<'_, S>, x: NodeId| {
            let y = g.conv(x, p, p + 1);
            p += 2;
            g.relu(y)
        };
        let mut skips = Vec::new();
        let mut h = x;
        for l in 0..self.config.depth {
            if l > 0 {
                h = g.maxpool(h);
            }
            h = conv_relu(g, h);
            h = conv_relu(g, h);
            skips.push(h);
        }
        skips.pop();
        while let Some(skip) = skips.pop() {
            let up = g.upsample(h);
            let up = conv_relu(g, up);
            let cat = g.concat(skip, up);
            h = conv_relu(g, cat);
            h = conv_relu(g, h);
        }
        g.conv(h, p, p + 1)
    }

    /// Training objective on a batch and its gradient with respect to every
    /// parameter block.
    pub fn loss_and_gradients(
        &self,
        x: &Tensor<S>,
        targets: &[BinaryMask],
        alpha: f64,
        hausdorff_weight: f64,
    ) -> Result<(LossParts, Vec<Tensor<S>>)> {
        self.check_input(x.shape())?;
        let mut g = Graph::new(&self.params);
        let xi = g.input(x.clone());
        let z = self.logits(&mut g, xi);
        let (parts, _, dz) = objective(g.value(z), targets, alpha, hausdorff_weight)?;
        Ok((parts, g.backward(z, dz)))
    }

    /// Per-pixel foreground probabilities, shape `(batch, 1, H, W)`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new(&self.params);
        let xi = g.input(x.clone());
        let z = self.logits(&mut g, xi);
        let y = g.sigmoid(z);
        Ok(g.value(y).clone())
    }
}
