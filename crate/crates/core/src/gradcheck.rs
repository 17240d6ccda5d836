//! Central finite-difference checks against the tape's gradients.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{forward_on_tape, BackboneParams, LabelHead, ModelConfig, PromptPosition};
use crate::compose::{compose_on_tape, CompositionMethod};
use crate::encoder::encode_on_tape;
use crate::error::{Error, TensorError};
use crate::model::{PromptModel, WeightsMode};
use crate::rng::{normal_vec, stream};
use crate::router::sample_weights_on_tape;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Builds a scalar loss from a single trainable input.
pub trait TapeFn<E>: Fn(&mut Tape, Var) -> Result<Var, E> {}
impl<E, F: Fn(&mut Tape, Var) -> Result<Var, E>> TapeFn<E> for F {}

fn eval<E>(f: &impl TapeFn<E>, point: &Tensor) -> Result<f64, E> {
    let mut tape = Tape::new();
    let x = tape.constant(point.clone());
    let loss = f(&mut tape, x)?;
    Ok(tape.value(loss).item())
}

/// Autodiff gradient of `f` at `point`.
pub fn gradient<E: From<TensorError>>(f: &impl TapeFn<E>, point: &Tensor) -> Result<Tensor, E> {
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let loss = f(&mut tape, x)?;
    tape.backward(loss)?;
    Ok(tape.take_grad(x).expect("param leaf has a gradient"))
}

/// Gradient magnitudes below this are compared on an absolute scale: central
/// differences of an O(1) loss carry roundoff near `1e-16 / epsilon`.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between the autodiff gradient and central
/// differences, `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-6)` over coordinates.
pub fn finite_diff_check<E: From<TensorError>>(
    f: &impl TapeFn<E>,
    point: &Tensor,
    epsilon: f64,
) -> Result<f64, E> {
    if !(epsilon > 1e-8 && epsilon < 1e-3) {
        return Err(TensorError::BadEpsilon(epsilon).into());
    }
    let first = eval(f, point)?;
    let second = eval(f, point)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic.into());
    }

    let analytic = gradient(f, point)?;
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = eval(f, &probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = eval(f, &probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let ad = analytic.data()[i];
        let denom = libm::fabs(ad).max(libm::fabs(numeric)).max(DENOM_FLOOR);
        worst = worst.max(libm::fabs(ad - numeric) / denom);
    }
    Ok(worst)
}

type CaseFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var, Error>>;

/// A scalar function of one input tensor, checked at random points.
pub struct Case {
    pub name: String,
    pub shape: Vec<usize>,
    /// Inputs are drawn from `|N(0, 1)| + 0.5` instead of `N(0, 1)`.
    pub positive: bool,
    pub f: CaseFn,
}

impl Case {
    fn new(name: &str, shape: &[usize], f: impl Fn(&mut Tape, Var) -> Result<Var, Error> + 'static) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            positive: false,
            f: Box::new(f),
        }
    }

    fn positive(mut self) -> Self {
        self.positive = true;
        self
    }

    /// Largest relative error over `points` random inputs.
    pub fn check(&self, points: usize, seed: u64, epsilon: f64) -> Result<f64, Error> {
        let n: usize = self.shape.iter().product();
        let mut rng = stream(seed, "gradcheck-points", &[crate::rng::key_of(&self.name)]);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let mut data = normal_vec(&mut rng, n, 1.0);
            if self.positive {
                data.iter_mut().for_each(|x| *x = libm::fabs(*x) + 0.5);
            }
            let point = Tensor::new(self.shape.clone(), data)?;
            worst = worst.max(finite_diff_check(&self.f, &point, epsilon)?);
        }
        Ok(worst)
    }
}

fn fixed(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(&mut stream(seed, "gradcheck-fixed", &[n as u64]), n, 1.0))
        .expect("shape and data agree")
}

/// Random weighted sum, so every output coordinate gets a distinct gradient.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var, Error> {
    let w = t.constant(fixed(t.value(y).shape(), seed));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// One case per differentiable tape op.
pub fn op_cases() -> Vec<Case> {
    vec![
        Case::new("matmul", &[3, 4], |t, x| {
            let b = t.constant(fixed(&[4, 2], 1));
            let y = t.matmul(x, b)?;
            project(t, y, 2)
        }),
        Case::new("matmul-rhs", &[4, 2], |t, x| {
            let a = t.constant(fixed(&[3, 4], 3));
            let y = t.matmul(a, x)?;
            project(t, y, 4)
        }),
        Case::new("transpose", &[3, 2], |t, x| {
            let y = t.transpose(x)?;
            project(t, y, 5)
        }),
        Case::new("add", &[2, 3], |t, x| {
            let b = t.constant(fixed(&[2, 3], 6));
            let y = t.add(x, b)?;
            let y = t.mul(y, y)?;
            project(t, y, 7)
        }),
        Case::new("sub", &[2, 3], |t, x| {
            let b = t.constant(fixed(&[2, 3], 8));
            let y = t.sub(b, x)?;
            let y = t.mul(y, x)?;
            project(t, y, 9)
        }),
        Case::new("mul", &[2, 3], |t, x| {
            let y = t.mul(x, x)?;
            project(t, y, 10)
        }),
        Case::new("add_row", &[1, 3], |t, x| {
            let a = t.constant(fixed(&[4, 3], 11));
            let y = t.add_row(a, x)?;
            let y = t.mul(y, y)?;
            project(t, y, 12)
        }),
        Case::new("scale", &[2, 2], |t, x| {
            let y = t.scale(x, -1.7);
            let y = t.mul(y, x)?;
            project(t, y, 13)
        }),
        Case::new("scale_by", &[1, 3], |t, x| {
            let a = t.constant(fixed(&[2, 4], 14));
            let y = t.scale_by(a, x, 1)?;
            project(t, y, 15)
        }),
        Case::new("concat_rows", &[2, 3], |t, x| {
            let b = t.constant(fixed(&[1, 3], 16));
            let y = t.concat_rows(&[b, x, x])?;
            let y = t.mul(y, y)?;
            project(t, y, 17)
        }),
        Case::new("slice_rows", &[4, 2], |t, x| {
            let y = t.slice_rows(x, 1, 3)?;
            let y = t.mul(y, y)?;
            project(t, y, 18)
        }),
        Case::new("softmax-rows", &[3, 4], |t, x| {
            let y = t.softmax(x, 1)?;
            project(t, y, 19)
        }),
        Case::new("softmax-cols", &[3, 4], |t, x| {
            let y = t.softmax(x, 0)?;
            project(t, y, 20)
        }),
        Case::new("sigmoid", &[2, 3], |t, x| {
            let y = t.sigmoid(x);
            project(t, y, 21)
        }),
        Case::new("gelu", &[2, 3], |t, x| {
            let y = t.gelu(x);
            project(t, y, 22)
        }),
        Case::new("log", &[2, 3], |t, x| {
            let y = t.log(x)?;
            project(t, y, 23)
        })
        .positive(),
        Case::new("rms_norm", &[3, 5], |t, x| {
            let y = t.rms_norm(x)?;
            project(t, y, 24)
        }),
        Case::new("mean", &[2, 3], |t, x| {
            let y = t.mul(x, x)?;
            let m = t.mean(y);
            let w = t.constant(Tensor::scalar(1.3));
            let m = t.mul(m, w)?;
            Ok(t.sum(m))
        }),
        Case::new("sum", &[2, 3], |t, x| {
            let y = t.gelu(x);
            Ok(t.sum(y))
        }),
        Case::new("embedding", &[5, 3], |t, x| {
            let y = t.embedding(x, &[4, 0, 4, 2])?;
            let y = t.mul(y, y)?;
            project(t, y, 25)
        }),
        Case::new("gather_cols", &[2, 5], |t, x| {
            let y = t.gather_cols(x, &[3, 1])?;
            let y = t.mul(y, y)?;
            project(t, y, 26)
        }),
        Case::new("cross_entropy", &[3, 4], |t, x| Ok(t.cross_entropy(x, &[2, 0, 3])?)),
    ]
}

/// The parameter a pipeline case differentiates with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineInput {
    Private,
    Source,
    RouterLogits,
    PrivateEncoderW1,
}

const PIPE_TASKS: [&str; 2] = ["x", "y"];
const PIPE_SOURCES: usize = 2;
const PIPE_SOURCE_LEN: usize = 2;

fn pipeline_backbone() -> BackboneParams {
    let config = ModelConfig {
        vocab: 10,
        d: 4,
        layers: 1,
        heads: 2,
        seq_len: 3,
        max_prompt_len: 8,
        mlp_hidden: 6,
    };
    BackboneParams::init(&config, 5).expect("valid config").freeze()
}

fn pipeline_model(method: CompositionMethod) -> PromptModel {
    let tasks: Vec<String> = PIPE_TASKS.iter().map(|s| String::from(*s)).collect();
    let mut model = PromptModel::init(method, WeightsMode::Learned, &tasks, PIPE_SOURCES, PIPE_SOURCE_LEN, 4, 3)
        .expect("valid model");
    // Unit-scale prompts keep every path through the encoders well conditioned.
    let mut rng = stream(3, "gradcheck-prompts", &[]);
    for p in model.bank.sources.iter_mut().chain(model.bank.privates.values_mut()) {
        let n = p.tokens.len();
        p.tokens.data_mut().copy_from_slice(&normal_vec(&mut rng, n, 1.0));
    }
    if let Some(r) = model.router.as_mut() {
        let n = r.logits.len();
        r.logits.data_mut().copy_from_slice(&normal_vec(&mut rng, n, 1.0));
    }
    model
}

/// Shape of `input` in the pipeline model for `method`.
pub fn pipeline_input_shape(method: CompositionMethod, input: PipelineInput) -> Vec<usize> {
    let m = pipeline_model(method);
    match input {
        PipelineInput::Private => m.bank.privates["x"].tokens.shape().to_vec(),
        PipelineInput::Source => m.bank.sources[0].tokens.shape().to_vec(),
        PipelineInput::RouterLogits => m.router.as_ref().expect("sources").logits.shape().to_vec(),
        PipelineInput::PrivateEncoderW1 => m.private_encoders["x"].w1.shape().to_vec(),
    }
}

/// Prompt composition, encoders, backbone and cross-entropy as one function of `input`.
pub fn pipeline_case(method: CompositionMethod, input: PipelineInput) -> Case {
    let backbone = pipeline_backbone();
    let model = pipeline_model(method);
    let name = alloc::format!("pipeline-{}-{:?}", method.as_str(), input);
    let shape = pipeline_input_shape(method, input);
    let examples: [(&[usize], usize); 3] = [(&[2, 5, 7], 0), (&[9, 3, 3], 1), (&[4, 8, 6], 1)];
    let uniforms = [0.3, 0.8];
    Case::new(&name, &shape, move |t, x| {
        let bb = backbone.register(t, false);
        let head = LabelHead::register(t, &bb, &[0, 1])?;
        let pick = |t: &mut Tape, which: PipelineInput, value: &Tensor| {
            if which == input {
                x
            } else {
                t.constant(value.clone())
            }
        };
        let private_prompt = pick(t, PipelineInput::Private, &model.bank.privates["x"].tokens);
        let enc = model.private_encoders["x"].register(t, false);
        let enc = crate::encoder::EncoderVars {
            w1: pick(t, PipelineInput::PrivateEncoderW1, &model.private_encoders["x"].w1),
            ..enc
        };
        let private = encode_on_tape(t, &enc, private_prompt)?;
        let mut sources = Vec::new();
        for (s, p) in model.bank.sources.iter().enumerate() {
            let v = if s == 0 {
                pick(t, PipelineInput::Source, &p.tokens)
            } else {
                t.constant(p.tokens.clone())
            };
            let e = model.source_encoders[s].register(t, false);
            sources.push(encode_on_tape(t, &e, v)?);
        }
        let weights = match &model.router {
            Some(r) => {
                let logits = pick(t, PipelineInput::RouterLogits, &r.logits);
                Some(sample_weights_on_tape(t, logits, 0, &uniforms, 0.7)?)
            }
            None => None,
        };
        let target = compose_on_tape(t, method, private, &sources, weights)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (tokens, label) in examples {
            rows.push(forward_on_tape(t, &backbone.config, &bb, &head, Some(target), None, tokens, PromptPosition::Append)?);
            targets.push(label);
        }
        let logits = t.concat_rows(&rows)?;
        Ok(t.cross_entropy(logits, &targets)?)
    })
}

/// Every pipeline case: each method against each of its trainable inputs.
pub fn pipeline_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for method in CompositionMethod::ALL {
        let mut inputs = vec![PipelineInput::Private, PipelineInput::PrivateEncoderW1];
        if method.uses_sources() {
            inputs.extend([PipelineInput::Source, PipelineInput::RouterLogits]);
        }
        for input in inputs {
            out.push(pipeline_case(method, input));
        }
    }
    out
}
