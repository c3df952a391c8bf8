//! Micro U-shaped segmentation network.
//!
//! Two 2×-pooling levels, two 3×3 conv+bias+relu layers per stage, nearest
//! upsampling with skip concatenation, and a 1×1 head followed by a channel
//! softmax over background plus `K` organs.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CheckpointRole, EmaHeader, CHECKPOINT_MAGIC,
};

use crate::autodiff::{Bindings, Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::phantom::{mix_seed, LabelMap};

/// Shape-determining hyper-parameters of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    /// Output channels: background plus organs.
    pub classes: usize,
    pub base_channels: usize,
}

struct ConvLayer {
    name: &'static str,
    cin: usize,
    cout: usize,
    kernel: usize,
}

impl Architecture {
    pub fn new(organs: usize, base_channels: usize) -> Result<Self> {
        if organs < 1 {
            return Err(Error::Config(
                "the network needs at least one organ class".into(),
            ));
        }
        if base_channels < 4 {
            return Err(Error::Config(format!(
                "base_channels must be at least 4, got {base_channels}"
            )));
        }
        Ok(Self {
            classes: organs + 1,
            base_channels,
        })
    }

    pub fn organs(&self) -> usize {
        self.classes - 1
    }

    fn layers(&self) -> Vec<ConvLayer> {
        let b = self.base_channels;
        let l = |name, cin, cout, kernel| ConvLayer {
            name,
            cin,
            cout,
            kernel,
        };
        vec![
            l("enc1.conv1", 1, b, 3),
            l("enc1.conv2", b, b, 3),
            l("enc2.conv1", b, 2 * b, 3),
            l("enc2.conv2", 2 * b, 2 * b, 3),
            l("bottleneck.conv1", 2 * b, 4 * b, 3),
            l("bottleneck.conv2", 4 * b, 4 * b, 3),
            l("dec2.conv1", 4 * b + 2 * b, 2 * b, 3),
            l("dec2.conv2", 2 * b, 2 * b, 3),
            l("dec1.conv1", 2 * b + b, b, 3),
            l("dec1.conv2", b, b, 3),
            l("head", b, self.classes, 1),
        ]
    }

    /// Names and shapes of every parameter tensor, in architectural order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                [
                    (
                        format!("{}.weight", l.name),
                        vec![l.cout, l.cin, l.kernel, l.kernel],
                    ),
                    (format!("{}.bias", l.name), vec![l.cout]),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Operator sequence plus every parameter shape.
    pub fn fingerprint(&self) -> String {
        let mut fp = format!(
            "segnet-v1/classes={}/base={}",
            self.classes, self.base_channels
        );
        let ops = [
            "c", "r", "c", "r", "P", "c", "r", "c", "r", "P", "c", "r", "c", "r", "U", "K", "c",
            "r", "c", "r", "U", "K", "c", "r", "c", "r", "h", "S",
        ];
        fp.push('/');
        fp.push_str(&ops.concat());
        for (name, shape) in self.param_shapes() {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            fp.push_str(&format!(";{name}:{}", dims.join("x")));
        }
        fp
    }
}

/// The full parameter set of one network, in architectural order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    arch: Architecture,
    tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    /// Wraps tensors that must match `arch` exactly (names, order and shapes).
    pub fn from_tensors(arch: Architecture, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let expected = arch.param_shapes();
        if expected.len() != tensors.len()
            || expected
                .iter()
                .zip(&tensors)
                .any(|((n, s), (m, t))| n != m || s.as_slice() != t.shape())
        {
            return Err(Error::Shape {
                op: "model_params",
                detail: format!("tensors do not match architecture {}", arch.fingerprint()),
            });
        }
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn fingerprint(&self) -> String {
        self.arch.fingerprint()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn bind<'a>(&'a self, bindings: &mut Bindings<'a, T>) {
        for (n, t) in &self.tensors {
            bindings.bind(n, t);
        }
    }

    pub fn bindings(&self) -> Bindings<'_, T> {
        let mut b = Bindings::new();
        self.bind(&mut b);
        b
    }

    /// All values flattened in architectural order.
    pub fn flat(&self) -> Vec<T> {
        self.tensors
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }
}

/// Kernels uniform in `±sqrt(6 / fan_in)`, biases zero.
pub fn init_params(seed: u64, organs: usize, base_channels: usize) -> Result<ModelParams> {
    let arch = Architecture::new(organs, base_channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5E6_4E7]));
    let tensors = arch
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let bound = (6.0 / fan_in).sqrt();
                (0..n)
                    .map(|_| rng.random_range(-bound..bound) as f32)
                    .collect()
            } else {
                vec![0.0; n]
            };
            Ok((name, Tensor::new(&shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(arch, tensors)
}

/// Adds the network to `g`, reading its input from node `x` (`1×H×W`).
/// Parameter leaves are named `prefix + name`. Returns the softmax output node.
pub fn build<T: Scalar>(g: &mut Graph<T>, x: NodeId, arch: Architecture, prefix: &str) -> NodeId {
    let mut layers = arch.layers().into_iter();
    let mut conv = |g: &mut Graph<T>, input: NodeId, relu: bool| {
        let l = layers.next().expect("layer list matches the wiring below");
        let w = g.param(&format!("{prefix}{}.weight", l.name));
        let b = g.param(&format!("{prefix}{}.bias", l.name));
        let y = g.conv2d(input, w);
        let y = g.bias_add(y, b);
        if relu {
            g.relu(y)
        } else {
            y
        }
    };
    let e1 = conv(g, x, true);
    let e1 = conv(g, e1, true);
    let p1 = g.maxpool2(e1);
    let e2 = conv(g, p1, true);
    let e2 = conv(g, e2, true);
    let p2 = g.maxpool2(e2);
    let bt = conv(g, p2, true);
    let bt = conv(g, bt, true);
    let u2 = g.upsample2(bt);
    let c2 = g.concat(u2, e2);
    let d2 = conv(g, c2, true);
    let d2 = conv(g, d2, true);
    let u1 = g.upsample2(d2);
    let c1 = g.concat(u1, e1);
    let d1 = conv(g, c1, true);
    let d1 = conv(g, d1, true);
    let logits = conv(g, d1, false);
    g.softmax(logits)
}

/// Per-pixel class probabilities, `classes × H × W`; channel 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbMap {
    probs: Tensor<f32>,
}

impl ClassProbMap {
    pub fn new(probs: Tensor<f32>) -> Result<Self> {
        if probs.chw().is_none() {
            return Err(Error::Shape {
                op: "class_prob_map",
                detail: format!("expected classes×H×W, got {:?}", probs.shape()),
            });
        }
        Ok(Self { probs })
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.probs
    }

    /// Probability plane of one class.
    pub fn channel(&self, class: usize) -> &[f32] {
        let hw = self.height() * self.width();
        &self.probs.data()[class * hw..(class + 1) * hw]
    }

    /// Per-pixel most probable class; ties go to the lower class index.
    pub fn argmax(&self) -> LabelMap {
        let hw = self.height() * self.width();
        let data = self.probs.data();
        let labels = (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.classes() {
                    if data[c * hw + p] > data[best * hw + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(self.height(), self.width(), labels).expect("extents from the tensor")
    }
}

/// Runs the network on an `H×W` (or `1×H×W`) image.
pub fn predict(image: &Tensor<f32>, params: &ModelParams) -> Result<ClassProbMap> {
    let (h, w) = match image.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        other => {
            return Err(Error::Shape {
                op: "predict",
                detail: format!("expected an H×W image, got {other:?}"),
            })
        }
    };
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Shape {
            op: "predict",
            detail: format!("image extents {h}×{w} must be divisible by 4"),
        });
    }
    let input = image.clone().reshape(&[1, h, w])?;
    let mut g = Graph::new();
    let x = g.input("image");
    let probs = build(&mut g, x, params.arch(), "");
    let mut b = params.bindings();
    b.bind("image", &input);
    let out = g.forward(probs, &b)?.clone();
    ClassProbMap::new(out)
}
