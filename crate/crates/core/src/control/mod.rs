//! Dense feed-forward controllers mapping sensor vectors to motor targets.

pub mod checkpoint;
pub mod sensors;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tape::{Real, Shape, Tape, Var};

pub use sensors::{read_sensors, sensor_width, SensorContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Rectifier,
    Identity,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Rectifier => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Rectifier),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Layer sizes `(input, hidden..., output)` with one activation per
/// non-input layer. With `skip_input_to_output` the network input is
/// concatenated to the last hidden layer before the output layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    #[serde(default)]
    pub skip_input_to_output: bool,
}

/// Offset and shape of one weight matrix or bias row in the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerBlocks {
    /// `[fan_in, fan_out]`, row-major.
    pub weight: Block,
    /// `[1, fan_out]`.
    pub bias: Block,
}

impl ControllerSpec {
    /// Rectifier hidden layers and an identity output layer.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, skip: bool) -> Self {
        let mut layer_sizes = vec![input];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(output);
        let mut activations = vec![Activation::Rectifier; hidden.len()];
        activations.push(Activation::Identity);
        Self {
            layer_sizes,
            activations,
            skip_input_to_output: skip,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |d: &str| Err(Error::Contract(d.into()));
        if self.layer_sizes.len() < 2 {
            return bad("controller needs an input and an output layer");
        }
        if self.activations.len() != self.layer_sizes.len() - 1 {
            return bad("one activation per non-input layer required");
        }
        if self.layer_sizes.contains(&0) {
            return bad("layer sizes must be positive");
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layout(&self) -> Vec<LayerBlocks> {
        let n = self.layer_sizes.len() - 1;
        let mut offset = 0;
        let mut out = Vec::with_capacity(n);
        for l in 0..n {
            let mut fan_in = self.layer_sizes[l];
            if l == n - 1 && self.skip_input_to_output && n > 1 {
                fan_in += self.layer_sizes[0];
            }
            let fan_out = self.layer_sizes[l + 1];
            let weight = Block {
                offset,
                shape: Shape::new(fan_in, fan_out),
            };
            offset += fan_in * fan_out;
            let bias = Block {
                offset,
                shape: Shape::new(1, fan_out),
            };
            offset += fan_out;
            out.push(LayerBlocks { weight, bias });
        }
        out
    }

    /// Shapes of the tensors the flat vector splits into, in order.
    pub fn shapes(&self) -> Vec<Shape> {
        self.layout()
            .iter()
            .flat_map(|l| [l.weight.shape, l.bias.shape])
            .collect()
    }
}

/// Exact number of weights and biases.
pub fn param_count(spec: &ControllerSpec) -> usize {
    spec.layout().last().map_or(0, |l| l.bias.offset + l.bias.shape.cols)
}

/// Hidden weights uniform in `±√(6/fan_in)`, hidden biases zero, output
/// layer exactly zero so the initial controller outputs zero everywhere.
pub fn init_params(spec: &ControllerSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = spec.layout();
    let mut p = vec![0.0; param_count(spec)];
    for l in &layout[..layout.len() - 1] {
        let bound = (6.0 / l.weight.shape.rows as f64).sqrt();
        for w in &mut p[l.weight.offset..l.weight.offset + l.weight.shape.numel()] {
            *w = rng.gen_range(-bound..bound);
        }
    }
    p
}

/// Splits a flat parameter vector into tape tensors following `shapes`.
pub fn record_params<T: Real>(tape: &mut Tape<T>, flat: &[f64], shapes: &[Shape], leaves: bool) -> Vec<Var> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let data: Vec<T> = flat[off..off + s.numel()].iter().map(|&x| T::lit(x)).collect();
            off += s.numel();
            if leaves {
                tape.leaf_slice(s.rows, s.cols, &data)
            } else {
                let t = crate::tape::Tensor::new(*s, data).unwrap();
                tape.constant(t)
            }
        })
        .collect()
}

/// Dense forward pass on `[B, input]` sensors; `params` as produced by
/// [`record_params`] with [`ControllerSpec::shapes`].
pub fn controller_forward<T: Real>(
    tape: &mut Tape<T>,
    spec: &ControllerSpec,
    params: &[Var],
    sensors: Var,
) -> crate::Result<Var> {
    let width = tape.shape(sensors).cols;
    if width != spec.input_size() {
        return Err(Error::Contract(format!(
            "sensor width {width} does not match controller input {}",
            spec.input_size()
        )));
    }
    let n = spec.layer_sizes.len() - 1;
    let mut h = sensors;
    for l in 0..n {
        if l == n - 1 && spec.skip_input_to_output && n > 1 {
            h = tape.concat(&[h, sensors])?;
        }
        let z = tape.matmul(h, params[2 * l])?;
        let z = tape.add(z, params[2 * l + 1])?;
        h = match spec.activations[l] {
            Activation::Rectifier => tape.relu(z),
            Activation::Identity => z,
        };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{Axis, Tensor, TraceError};
    use proptest::prelude::*;

    #[test]
    fn paper_parameter_counts() {
        assert_eq!(param_count(&ControllerSpec::mlp(1, &[128, 128], 4, false)), 17_284);
        assert_eq!(param_count(&ControllerSpec::mlp(3, &[128, 128], 4, false)), 17_540);
        assert_eq!(param_count(&ControllerSpec::mlp(2, &[128, 128], 8, true)), 17_944);
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let spec = ControllerSpec::mlp(3, &[16, 16], 4, false);
        assert_eq!(init_params(&spec, 7), init_params(&spec, 7));
        assert_ne!(init_params(&spec, 1), init_params(&spec, 2));
    }

    #[test]
    fn affine_layer() {
        let spec = ControllerSpec {
            layer_sizes: vec![2, 2],
            activations: vec![Activation::Identity],
            skip_input_to_output: false,
        };
        // W is [fan_in, fan_out]: y = x·W + b
        let flat = [1.0, 2.0, 3.0, 4.0, 0.5, -0.5];
        let mut tape = Tape::<f64>::new();
        let p = record_params(&mut tape, &flat, &spec.shapes(), true);
        let x = tape.constant_f64(1, 2, &[1.0, -1.0]);
        let y = controller_forward(&mut tape, &spec, &p, x).unwrap();
        assert_eq!(tape.value(y), &[1.0 - 3.0 + 0.5, 2.0 - 4.0 - 0.5]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let spec = ControllerSpec::mlp(3, &[4], 2, false);
        let mut tape = Tape::<f64>::new();
        let p = record_params(&mut tape, &init_params(&spec, 0), &spec.shapes(), false);
        let x = tape.constant_f64(1, 2, &[0.0, 0.0]);
        assert!(controller_forward(&mut tape, &spec, &p, x).is_err());
    }

    #[test]
    fn mean_output_gradient_matches_finite_differences() {
        let spec = ControllerSpec::mlp(3, &[6, 5], 2, true);
        let mut flat = init_params(&spec, 3);
        // Non-zero output layer so every parameter has an effect.
        for (i, v) in flat.iter_mut().enumerate() {
            if *v == 0.0 {
                *v = 0.05 * ((i % 7) as f64 - 3.0) + 0.01;
            }
        }
        let shapes = spec.shapes();
        let x = [0.3, -0.8, 1.1, 0.9, 0.2, -0.4];
        let r: crate::Result<_> = crate::gradcheck::finite_difference_check(
            |tape, p| {
                let mut parts = Vec::new();
                let mut off = 0;
                for s in &shapes {
                    let seg = tape.slice(p, off, s.numel())?;
                    off += s.numel();
                    parts.push(reshape(tape, seg, *s)?);
                }
                let xs = tape.constant_f64(2, 3, &x);
                let y = controller_forward(tape, &spec, &parts, xs)?;
                Ok(tape.mean(y, Axis::All))
            },
            &flat,
            1e-6,
        );
        let r = r.unwrap();
        assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
    }

    /// `[1, r·c]` to `[r, c]` by stacking row slices through a matmul with
    /// selector matrices (the tape has no reshape primitive).
    fn reshape(tape: &mut Tape<f64>, v: Var, s: Shape) -> Result<Var, TraceError> {
        if s.rows == 1 {
            return Ok(v);
        }
        let mut acc: Option<Var> = None;
        for r in 0..s.rows {
            let row = tape.slice(v, r * s.cols, s.cols)?;
            let mut e = vec![0.0; s.rows];
            e[r] = 1.0;
            let sel = tape.constant_f64(s.rows, 1, &e);
            let placed = tape.matmul(sel, row)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, placed)?,
                None => placed,
            });
        }
        Ok(acc.unwrap())
    }

    fn spec_strategy() -> impl Strategy<Value = ControllerSpec> {
        (
            1usize..6,
            prop::collection::vec(1usize..20, 0..4),
            1usize..6,
            any::<bool>(),
        )
            .prop_map(|(i, h, o, s)| ControllerSpec::mlp(i, &h, o, s))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn count_matches_layout_and_init(spec in spec_strategy(), seed in any::<u64>()) {
            let p = init_params(&spec, seed);
            prop_assert_eq!(p.len(), param_count(&spec));
            let total: usize = spec.shapes().iter().map(|s| s.numel()).sum();
            prop_assert_eq!(total, p.len());
        }

        #[test]
        fn zero_output_at_init(
            spec in spec_strategy(),
            seed in any::<u64>(),
            x in prop::collection::vec(-5.0..5.0f64, 5),
        ) {
            let p = init_params(&spec, seed);
            let mut tape = Tape::<f64>::new();
            let vars = record_params(&mut tape, &p, &spec.shapes(), false);
            let xs = tape.constant(Tensor::from_f64(1, spec.input_size(), &x[..spec.input_size()]));
            let y = controller_forward(&mut tape, &spec, &vars, xs).unwrap();
            prop_assert!(tape.value(y).iter().all(|&v| v == 0.0));
        }

        #[test]
        fn batch_consistent(seed in any::<u64>(), x in prop::collection::vec(-2.0..2.0f64, 12)) {
            let spec = ControllerSpec::mlp(3, &[8, 8], 2, true);
            let mut p = init_params(&spec, seed);
            for (i, v) in p.iter_mut().enumerate() {
                if *v == 0.0 { *v = 0.01 * (i % 5) as f64; }
            }
            let mut tape = Tape::<f64>::new();
            let vars = record_params(&mut tape, &p, &spec.shapes(), false);
            let xs = tape.constant_f64(4, 3, &x);
            let y = controller_forward(&mut tape, &spec, &vars, xs).unwrap();
            let batch = tape.value(y).to_vec();
            for r in 0..4 {
                let xr = tape.constant_f64(1, 3, &x[r * 3..r * 3 + 3]);
                let yr = controller_forward(&mut tape, &spec, &vars, xr).unwrap();
                prop_assert_eq!(tape.value(yr), &batch[r * 2..r * 2 + 2]);
            }
        }
    }
}
