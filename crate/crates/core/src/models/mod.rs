//! Layered feed-forward classifiers with hand-written backward passes.

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::LayerSpec;
use layers::{Init, Layer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Architecture {
    Preset(Preset),
    Layers(Vec<LayerSpec>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// A single linear layer.
    Logreg,
    /// linear(256), relu, dropout(0.5), linear(C)
    Mlp,
    /// Four 3x3 convolutions in two pooled blocks, then two linear layers.
    ShallowCnn,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logreg" => Ok(Preset::Logreg),
            "mlp" => Ok(Preset::Mlp),
            "shallow_cnn" | "shallowcnn" => Ok(Preset::ShallowCnn),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }
}

impl Preset {
    pub fn layers(self, input_shape: &[usize], class_count: usize) -> Result<Vec<LayerSpec>> {
        let flat: usize = input_shape.iter().product();
        let mut layers = Vec::new();
        if input_shape.len() > 1 && self != Preset::ShallowCnn {
            layers.push(LayerSpec::Flatten);
        }
        match self {
            Preset::Logreg => layers.push(LayerSpec::Linear {
                input: flat,
                output: class_count,
            }),
            Preset::Mlp => layers.extend([
                LayerSpec::Linear {
                    input: flat,
                    output: 256,
                },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Linear {
                    input: 256,
                    output: class_count,
                },
            ]),
            Preset::ShallowCnn => {
                let [channels, ..] = *input_shape else {
                    return Err(Error::Shape("shallow_cnn needs a [C,H,W] input".into()));
                };
                let conv = |i, o| LayerSpec::Conv2d {
                    in_channels: i,
                    out_channels: o,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                };
                let pool = LayerSpec::MaxPool2d { kernel: 2, stride: 2 };
                layers.extend([
                    conv(channels, 32),
                    LayerSpec::Relu,
                    conv(32, 32),
                    LayerSpec::Relu,
                    pool,
                    LayerSpec::Dropout { rate: 0.25 },
                    conv(32, 64),
                    LayerSpec::Relu,
                    conv(64, 64),
                    LayerSpec::Relu,
                    pool,
                    LayerSpec::Dropout { rate: 0.25 },
                    LayerSpec::Flatten,
                ]);
                let mut shape = input_shape.to_vec();
                for l in &layers {
                    shape = l.output_shape(&shape)?;
                }
                layers.extend([
                    LayerSpec::Linear {
                        input: shape[0],
                        output: 512,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Dropout { rate: 0.5 },
                    LayerSpec::Linear {
                        input: 512,
                        output: class_count,
                    },
                ]);
            }
        }
        Ok(layers)
    }
}

pub const INFER_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Mutable view of one parameter tensor and its gradient.
pub struct ParamSlot<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

#[derive(Clone, Debug)]
pub struct Model {
    input_shape: Vec<usize>,
    class_count: usize,
    seed: u64,
    layers: Vec<Layer>,
    mode: Mode,
    dropout_rng: ChaCha8Rng,
    grads_ready: bool,
}

/// Builds a model with seeded initialization: He-normal for every weighted
/// layer except the last, which is Xavier-normal. Biases start at zero.
pub fn build_model(
    architecture: &Architecture,
    input_shape: &[usize],
    class_count: usize,
    seed: u64,
) -> Result<Model> {
    if class_count < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {class_count}")));
    }
    let specs = match architecture {
        Architecture::Preset(p) => p.layers(input_shape, class_count)?,
        Architecture::Layers(l) => l.clone(),
    };
    let mut model = Model::from_layers(&specs, input_shape, class_count, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = model.layers.iter().rposition(|l| l.spec.has_params());
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let scheme = if Some(i) == last { Init::Xavier } else { Init::He };
        layer.init(scheme, &mut rng);
    }
    Ok(model)
}

impl Model {
    /// Zero-initialized model; geometry is validated layer by layer.
    pub(crate) fn from_layers(
        specs: &[LayerSpec],
        input_shape: &[usize],
        class_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {input_shape:?}")));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let layer = Layer::new(*spec, shape)?;
            shape = layer.out_shape.clone();
            layers.push(layer);
        }
        if shape != [class_count] {
            return Err(Error::Shape(format!(
                "model emits {shape:?}, expected [{class_count}] logits"
            )));
        }
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(1);
        Ok(Model {
            input_shape: input_shape.to_vec(),
            class_count,
            seed,
            layers,
            mode: Mode::Train,
            dropout_rng,
            grads_ready: false,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        if mode == Mode::Eval {
            self.layers.iter_mut().for_each(Layer::clear_cache);
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
            .collect()
    }

    pub fn gradients(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.grad_weight.iter().chain(l.grad_bias.iter()))
            .collect()
    }

    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::new();
        for l in &mut self.layers {
            if let (Some(w), Some(g)) = (l.weight.as_mut(), l.grad_weight.as_mut()) {
                slots.push(ParamSlot {
                    value: w.data_mut(),
                    grad: g.data_mut(),
                });
            }
            if let (Some(b), Some(g)) = (l.bias.as_mut(), l.grad_bias.as_mut()) {
                slots.push(ParamSlot {
                    value: b.data_mut(),
                    grad: g.data_mut(),
                });
            }
        }
        slots
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            for g in l.grad_weight.iter_mut().chain(l.grad_bias.iter_mut()) {
                g.data_mut().fill(0.0);
            }
        }
        self.grads_ready = false;
    }

    /// True once backward has populated gradients that no optimizer step
    /// has consumed yet.
    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    fn check_input(&self, inputs: &Tensor) -> Result<()> {
        if inputs.shape().len() < 2 || inputs.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "model expects [N, {:?}], got {:?}",
                self.input_shape,
                inputs.shape()
            )));
        }
        Ok(())
    }

    /// Logits `[N, C]`. Train mode draws dropout masks and caches
    /// activations for [`Model::backward`]; eval mode is a plain forward.
    pub fn forward(&mut self, inputs: &Tensor) -> Result<Tensor> {
        if self.mode == Mode::Eval {
            return self.infer(inputs);
        }
        self.check_input(inputs)?;
        let mut x = inputs.clone();
        for layer in &mut self.layers {
            x = layer.forward(x, Some(&mut self.dropout_rng));
        }
        Ok(x)
    }

    /// Eval-mode forward through a shared reference.
    pub fn infer(&self, inputs: &Tensor) -> Result<Tensor> {
        self.check_input(inputs)?;
        let mut x = inputs.clone();
        for layer in &self.layers {
            x = layer.infer(&x);
        }
        Ok(x)
    }

    /// Backpropagates `dL/dlogits`, accumulating parameter gradients, and
    /// returns `dL/dinputs`.
    pub fn backward(&mut self, logit_grads: &Tensor) -> Result<Tensor> {
        self.backward_inner(logit_grads, true)
            .map(|g| g.expect("input gradient requested"))
    }

    /// Like [`Model::backward`] but skips the input gradient of the first
    /// layer.
    pub fn backward_params(&mut self, logit_grads: &Tensor) -> Result<()> {
        self.backward_inner(logit_grads, false).map(|_| ())
    }

    fn backward_inner(&mut self, logit_grads: &Tensor, need_input: bool) -> Result<Option<Tensor>> {
        if self.mode != Mode::Train {
            return Err(Error::State("backward requires train mode".into()));
        }
        if logit_grads.shape().len() != 2 || logit_grads.shape()[1] != self.class_count {
            return Err(Error::Shape(format!(
                "logit gradients must be [N, {}], got {:?}",
                self.class_count,
                logit_grads.shape()
            )));
        }
        if !self.layers.iter().all(Layer::has_cache) {
            return Err(Error::State("backward called without a train-mode forward".into()));
        }
        let mut g = Some(logit_grads.clone());
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let dy = g.take().expect("gradient flows to every layer but the first");
            g = layer.backward(dy, i > 0 || need_input)?;
        }
        self.grads_ready = true;
        Ok(g)
    }

    /// Argmax class per sample, lowest index on ties.
    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(inputs.rows());
        self.infer_chunked(inputs, |logits| {
            preds.extend((0..logits.rows()).map(|i| argmax(logits.row(i))));
        })?;
        Ok(preds)
    }

    /// Eval-mode logits in row chunks of [`INFER_CHUNK`], handed to `each` in order.
    pub fn infer_chunked(&self, inputs: &Tensor, mut each: impl FnMut(&Tensor)) -> Result<()> {
        let n = inputs.rows();
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            each(&self.infer(&inputs.select_rows(&idx))?);
            start = end;
        }
        Ok(())
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_shapes() {
        let m = build_model(&Architecture::Preset(Preset::Logreg), &[784], 10, 0).unwrap();
        assert_eq!(
            m.layer_specs(),
            vec![LayerSpec::Linear {
                input: 784,
                output: 10
            }]
        );
        let m = build_model(&Architecture::Preset(Preset::Mlp), &[784], 10, 0).unwrap();
        assert_eq!(
            m.layer_specs(),
            vec![
                LayerSpec::Linear {
                    input: 784,
                    output: 256
                },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Linear {
                    input: 256,
                    output: 10
                },
            ]
        );
        let m = build_model(&Architecture::Preset(Preset::ShallowCnn), &[3, 32, 32], 10, 0).unwrap();
        let convs = m
            .layer_specs()
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv2d { .. }))
            .count();
        let linears = m
            .layer_specs()
            .iter()
            .filter(|l| matches!(l, LayerSpec::Linear { .. }))
            .count();
        assert_eq!((convs, linears), (4, 2));
        assert_eq!(
            m.layer_specs()[13],
            LayerSpec::Linear {
                input: 64 * 8 * 8,
                output: 512
            }
        );
    }

    #[test]
    fn same_seed_same_params() {
        let a = build_model(&Architecture::Preset(Preset::Mlp), &[20], 4, 9).unwrap();
        let b = build_model(&Architecture::Preset(Preset::Mlp), &[20], 4, 9).unwrap();
        let c = build_model(&Architecture::Preset(Preset::Mlp), &[20], 4, 10).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn rejects_bad_geometry() {
        let bad = Architecture::Layers(vec![LayerSpec::Linear { input: 5, output: 3 }]);
        assert!(build_model(&bad, &[4], 3, 0).is_err());
        let wrong_classes = Architecture::Layers(vec![LayerSpec::Linear { input: 4, output: 2 }]);
        assert!(build_model(&wrong_classes, &[4], 3, 0).is_err());
        let pool = Architecture::Layers(vec![
            LayerSpec::MaxPool2d { kernel: 5, stride: 1 },
            LayerSpec::Flatten,
            LayerSpec::Linear { input: 1, output: 2 },
        ]);
        assert!(build_model(&pool, &[1, 3, 3], 2, 0).is_err());
        let drop = Architecture::Layers(vec![
            LayerSpec::Dropout { rate: 1.0 },
            LayerSpec::Linear { input: 4, output: 2 },
        ]);
        assert!(build_model(&drop, &[4], 2, 0).is_err());
    }

    #[test]
    fn zero_weight_linear_emits_bias() {
        let arch = Architecture::Layers(vec![LayerSpec::Linear { input: 3, output: 2 }]);
        let mut m = build_model(&arch, &[3], 2, 0).unwrap();
        for p in m.parameters_mut() {
            p.data_mut().fill(0.0);
        }
        m.parameters_mut()[1].data_mut().copy_from_slice(&[0.25, -1.5]);
        m.set_mode(Mode::Eval);
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn eval_is_deterministic_and_pool_of_constant_is_constant() {
        let arch = Architecture::Layers(vec![
            LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Flatten,
            LayerSpec::Linear { input: 4, output: 2 },
        ]);
        let mut m = build_model(&arch, &[1, 4, 4], 2, 3).unwrap();
        m.set_mode(Mode::Eval);
        let x = Tensor::new(vec![1, 1, 4, 4], vec![0.7; 16]).unwrap();
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());

        let pool = Layer::new(LayerSpec::MaxPool2d { kernel: 2, stride: 2 }, vec![1, 4, 4]).unwrap();
        let y = pool.infer(&x);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn backward_needs_forward() {
        let mut m = build_model(&Architecture::Preset(Preset::Logreg), &[3], 2, 0).unwrap();
        let g = Tensor::zeros(vec![1, 2]);
        assert!(matches!(m.backward(&g), Err(Error::State(_))));
        let x = Tensor::zeros(vec![2, 3]);
        m.forward(&x).unwrap();
        assert!(matches!(m.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn relu_dead_region_blocks_gradient() {
        let arch = Architecture::Layers(vec![
            LayerSpec::Linear { input: 2, output: 3 },
            LayerSpec::Relu,
            LayerSpec::Linear { input: 3, output: 2 },
        ]);
        let mut m = build_model(&arch, &[2], 2, 1).unwrap();
        // Force every hidden pre-activation negative.
        m.parameters_mut()[0].data_mut().fill(0.0);
        m.parameters_mut()[1].data_mut().fill(-1.0);
        let x = Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap();
        m.forward(&x).unwrap();
        let dx = m
            .backward(&Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(m.gradients()[0].data().iter().all(|&v| v == 0.0));
        assert!(m.gradients()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_ties_to_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
