//! Model architectures and their division at cut layers, with per-portion
//! parameter and FLOP counts.

use serde::{Deserialize, Serialize};

use crate::autodiff::{LayerSpec, LayerStack, Tensor};
use crate::error::{Error, Result};
use crate::transport::codec;

/// Architecture of a full (unsplit) model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self { input_shape, layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::InvalidArgument("a model needs at least two layers".into()));
        }
        if self.layers.last() != Some(&LayerSpec::SoftmaxXentHead) {
            return Err(Error::InvalidArgument("a model must end in a classification head".into()));
        }
        self.shapes().map(|_| ())
    }

    /// Per-sample output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        self.layers
            .iter()
            .map(|l| {
                shape = l.output_shape(&shape)?;
                Ok(shape.clone())
            })
            .collect()
    }

    /// Dense/ReLU network `inputs - hidden... - classes`.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Dense { inputs: width, units: h });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Dense { inputs: width, units: classes });
        layers.push(LayerSpec::SoftmaxXentHead);
        Self::new(vec![inputs], layers)
    }

    /// `inputs-64-32-classes`.
    pub fn mlp_small(inputs: usize, classes: usize) -> Result<Self> {
        Self::mlp(inputs, &[64, 32], classes)
    }

    /// Two conv(5x5)+relu+maxpool(2,2) blocks followed by two dense layers.
    pub fn lenet_lite(image: [usize; 3], classes: usize) -> Result<Self> {
        let [c, h, w] = image;
        let blocks = [
            LayerSpec::Conv2d { in_channels: c, out_channels: 6, kernel: 5 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2, stride: 2 },
            LayerSpec::Conv2d { in_channels: 6, out_channels: 16, kernel: 5 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2, stride: 2 },
            LayerSpec::Flatten,
        ];
        let probe = ModelSpec { input_shape: vec![c, h, w], layers: blocks.to_vec() };
        let flat = probe.shapes()?.last().expect("non-empty")[0];
        let mut layers = blocks.to_vec();
        layers.extend([
            LayerSpec::Dense { inputs: flat, units: 64 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 64, units: classes },
            LayerSpec::SoftmaxXentHead,
        ]);
        Self::new(vec![c, h, w], layers)
    }

    /// Builds a named preset for a dataset's sample shape and class count.
    pub fn preset(name: &str, sample_shape: &[usize], classes: usize) -> Result<Self> {
        let flat: usize = sample_shape.iter().product();
        match name {
            "mlp-small" => Self::mlp_small(flat, classes),
            "lenet-lite" => match *sample_shape {
                [c, h, w] => Self::lenet_lite([c, h, w], classes),
                _ => Err(Error::InvalidArgument(format!("lenet-lite needs [c, h, w] samples, got {sample_shape:?}"))),
            },
            other => Err(Error::InvalidArgument(format!("unknown model preset {other:?}"))),
        }
    }

    /// Xavier-uniform initialisation from the run seed.
    pub fn init(&self, seed: u64) -> Result<LayerStack> {
        LayerStack::from_specs(self.input_shape.clone(), &self.layers, seed, 0)
    }
}

/// A model divided at a cut layer: the client holds layers `[0, cut]`, the
/// server holds `(cut, end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub client: LayerStack,
    pub server: LayerStack,
    pub cut: usize,
}

/// Moves the layers of `model` into client and server portions.
pub fn split(mut model: LayerStack, cut: usize) -> Result<SplitModel> {
    if cut == 0 || cut >= model.len() {
        return Err(Error::InvalidSplit(format!("cut {cut} must satisfy 1 <= cut < {}", model.len())));
    }
    let server = model.split_off(cut + 1)?;
    Ok(SplitModel { client: model, server, cut })
}

impl SplitModel {
    /// Per-sample shape of the activations sent across the cut.
    pub fn smashed_shape(&self) -> Vec<usize> {
        self.client.output_shape()
    }

    pub fn total_params(&self) -> usize {
        self.client.param_count() + self.server.param_count()
    }

    pub fn client_stats(&self) -> PortionStats {
        portion_stats(&self.client, self.total_params())
    }

    pub fn server_stats(&self) -> PortionStats {
        portion_stats(&self.server, self.total_params())
    }

    pub fn recombine(self) -> Result<LayerStack> {
        let mut full = self.client;
        full.append(self.server)?;
        Ok(full)
    }
}

/// Three-way split for label-free training: client front `[0, front_cut]`,
/// server middle `(front_cut, back_cut]`, client tail `(back_cut, end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UShapedModel {
    pub front: LayerStack,
    pub middle: LayerStack,
    pub tail: LayerStack,
}

pub fn split_ushaped(mut model: LayerStack, front_cut: usize, back_cut: usize) -> Result<UShapedModel> {
    if front_cut == 0 || front_cut >= back_cut || back_cut + 1 >= model.len() {
        return Err(Error::InvalidSplit(format!(
            "cuts ({front_cut}, {back_cut}) must satisfy 1 <= front < back < {}",
            model.len().saturating_sub(1)
        )));
    }
    let tail = model.split_off(back_cut + 1)?;
    let middle = model.split_off(front_cut + 1)?;
    Ok(UShapedModel { front: model, middle, tail })
}

impl UShapedModel {
    pub fn recombine(self) -> Result<LayerStack> {
        let mut full = self.front;
        full.append(self.middle)?;
        full.append(self.tail)?;
        Ok(full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortionStats {
    pub param_count: usize,
    /// This portion's share of the whole model's parameters.
    pub fraction: f64,
    pub flops_per_sample: u64,
}

pub fn portion_stats(portion: &LayerStack, total_params: usize) -> PortionStats {
    let param_count = portion.param_count();
    PortionStats {
        param_count,
        fraction: if total_params == 0 { 0.0 } else { param_count as f64 / total_params as f64 },
        flops_per_sample: portion.flops_per_sample(),
    }
}

/// Parameters travel as one rank-1 tensor of all weights and biases in
/// layer order, so the payload is `4 * params + 8` bytes.
pub fn serialize_params(portion: &LayerStack) -> Vec<u8> {
    codec::encode_tensor(&Tensor::from_vec(portion.flat_params()))
}

pub fn deserialize_params(portion: &mut LayerStack, bytes: &[u8]) -> Result<()> {
    let t = codec::decode_tensor(bytes)?;
    if t.rank() != 1 {
        return Err(Error::Decode("parameter payload must be a rank-1 tensor".into()));
    }
    portion.set_flat_params(t.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_layer() -> LayerStack {
        ModelSpec::mlp(6, &[5], 3).unwrap().init(11).unwrap()
    }

    #[test]
    fn cut_two_of_four_layers() {
        let s = split(four_layer(), 2).unwrap();
        assert_eq!(s.client.len(), 3);
        assert_eq!(s.server.len(), 1);
        assert_eq!(s.server.specs(), vec![LayerSpec::SoftmaxXentHead]);
    }

    #[test]
    fn degenerate_cuts_are_rejected() {
        assert!(matches!(split(four_layer(), 0), Err(Error::InvalidSplit(_))));
        assert!(matches!(split(four_layer(), 4), Err(Error::InvalidSplit(_))));
    }

    #[test]
    fn split_recombine_is_bit_identical() {
        let full = four_layer();
        let before = full.flat_params();
        let back = split(full, 1).unwrap().recombine().unwrap();
        let after = back.flat_params();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(before.len(), after.len());
    }

    #[test]
    fn lenet_lite_smashed_shape_after_second_pool() {
        // 28x28: conv5 -> 24, pool -> 12, conv5 -> 8, pool -> 4
        let spec = ModelSpec::lenet_lite([1, 28, 28], 10).unwrap();
        let pool_idx = spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::MaxPool2d { .. }))
            .map(|(i, _)| i)
            .nth(1)
            .unwrap();
        let s = split(spec.init(1).unwrap(), pool_idx).unwrap();
        assert_eq!(s.smashed_shape(), vec![16, 4, 4]);
    }

    #[test]
    fn presets_reject_bad_shapes() {
        assert!(ModelSpec::preset("lenet-lite", &[784], 10).is_err());
        assert!(ModelSpec::preset("resnet", &[4], 2).is_err());
        assert_eq!(ModelSpec::preset("mlp-small", &[784], 10).unwrap().layers.len(), 6);
    }

    #[test]
    fn fifty_fifty_split_fraction() {
        // 4->4 dense (20 params) | relu | 4->4 dense (20 params) | head
        let spec = ModelSpec::mlp(4, &[4], 4).unwrap();
        let s = split(spec.init(0).unwrap(), 1).unwrap();
        assert_eq!(s.client_stats().fraction, 0.5);
    }

    #[test]
    fn flops_and_params_are_additive_over_cuts() {
        let spec = ModelSpec::lenet_lite([1, 16, 16], 4).unwrap();
        let full = spec.init(3).unwrap();
        for cut in 1..full.len() {
            let s = split(full.clone(), cut).unwrap();
            assert_eq!(s.client.flops_per_sample() + s.server.flops_per_sample(), full.flops_per_sample());
            assert_eq!(s.client.param_count() + s.server.param_count(), full.param_count());
        }
    }

    #[test]
    fn param_payload_length_and_round_trip() {
        let s = split(four_layer(), 1).unwrap();
        let bytes = serialize_params(&s.client);
        assert_eq!(bytes.len(), 4 * s.client.param_count() + 8);
        let mut other = ModelSpec::mlp(6, &[5], 3).unwrap().init(99).unwrap();
        let mut other_client = split(other.clone(), 1).unwrap().client;
        deserialize_params(&mut other_client, &bytes).unwrap();
        assert_eq!(other_client, s.client);
        assert!(deserialize_params(&mut other, &bytes).is_err());
        assert!(deserialize_params(&mut other_client, &bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn parameter_free_portion_is_header_only() {
        let s = LayerStack::from_specs(vec![4], &[LayerSpec::Relu], 0, 0).unwrap();
        assert_eq!(serialize_params(&s).len(), 8);
    }

    #[test]
    fn ushaped_split_round_trip() {
        let full = ModelSpec::mlp(6, &[5, 4], 3).unwrap().init(2).unwrap();
        let u = split_ushaped(full.clone(), 1, 3).unwrap();
        assert_eq!(u.tail.specs(), vec![LayerSpec::Dense { inputs: 4, units: 3 }, LayerSpec::SoftmaxXentHead]);
        assert_eq!(u.recombine().unwrap(), full);
        assert!(split_ushaped(full.clone(), 3, 3).is_err());
        assert!(split_ushaped(full, 1, 6).is_err());
    }
}
