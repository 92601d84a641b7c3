//! Encoder/head split and the shared shift vector.
//!
//! A [`ShiftedEnsemble`] holds `n` frozen base encoders `w_i`, one trainable
//! shift `v` and `n` trainable heads. Member `i` runs with encoder `w_i + v`;
//! the effective weights are always recomputed from the frozen base, never
//! accumulated into it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Matrix, NetSpec, ParamVector};
use crate::rng::{stream, Purpose};

/// Splits a full parameter vector into encoder (all layers but the last) and head.
pub fn split(full: &ParamVector, spec: &NetSpec) -> Result<(ParamVector, ParamVector)> {
    if full.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "parameter vector has {} entries, spec {:?} needs {}",
            full.len(),
            spec.layer_sizes(),
            spec.param_count()
        )));
    }
    let (enc, head) = full.as_slice().split_at(spec.encoder_len());
    Ok((enc.to_vec().into(), head.to_vec().into()))
}

/// One network viewed as encoder + head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: NetSpec,
    encoder: ParamVector,
    head: ParamVector,
}

impl Model {
    pub fn new(spec: NetSpec, encoder: ParamVector, head: ParamVector) -> Result<Self> {
        if encoder.len() != spec.encoder_len() || head.len() != spec.head_len() {
            return Err(Error::Shape(format!(
                "encoder/head lengths {}/{} do not fit spec {:?} ({}/{})",
                encoder.len(),
                head.len(),
                spec.layer_sizes(),
                spec.encoder_len(),
                spec.head_len()
            )));
        }
        Ok(Self { spec, encoder, head })
    }

    pub fn from_params(spec: NetSpec, full: &ParamVector) -> Result<Self> {
        let (encoder, head) = split(full, &spec)?;
        Ok(Self { spec, encoder, head })
    }

    /// Seeded He initialization for ensemble member `index`.
    pub fn init(spec: NetSpec, seed: u64, index: usize) -> Self {
        let params = nn::init_params(&spec, &mut stream(seed, Purpose::ModelInit, index as u64, 0));
        Self::from_params(spec, &params).expect("init_params matches spec")
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &ParamVector {
        &self.encoder
    }

    pub fn head(&self) -> &ParamVector {
        &self.head
    }

    pub fn params(&self) -> ParamVector {
        self.encoder.concat(&self.head)
    }

    pub fn set_params(&mut self, full: &ParamVector) -> Result<()> {
        let (encoder, head) = split(full, &self.spec)?;
        self.encoder = encoder;
        self.head = head;
        Ok(())
    }

    /// Keeps the encoder and attaches a freshly initialized head for
    /// `classes` outputs, drawn from the `(seed, HeadInit, index)` stream.
    pub fn with_new_head(&self, classes: usize, seed: u64, index: usize) -> Result<Model> {
        let spec = self.spec.with_classes(classes)?;
        let last = spec.num_layers() - 1;
        let (fan_in, fan_out) = spec.layer_dims(last);
        let mut rng = stream(seed, Purpose::HeadInit, index as u64, 0);
        let limit = (6.0 / fan_in as f64).sqrt();
        let mut head: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        head.extend(std::iter::repeat_n(0.0, fan_out));
        Model::new(spec, self.encoder.clone(), head.into())
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        nn::predict_proba(&self.spec, &self.params(), x)
    }
}

/// How the shift vector starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftInit {
    /// `v = 0`: members start exactly at their pretrained encoders.
    #[default]
    Zeros,
    /// `v = mean_i w_i`.
    Mean,
    /// Each entry independently 0 or 1.
    RandomBinary,
}

pub fn init_shift(strategy: ShiftInit, base_encoders: &[ParamVector], seed: u64) -> Result<ParamVector> {
    let first = base_encoders
        .first()
        .ok_or_else(|| Error::Input("cannot initialize a shift for an empty ensemble".into()))?;
    let d = first.len();
    if let Some(b) = base_encoders.iter().find(|b| b.len() != d) {
        return Err(Error::Shape(format!(
            "base encoders differ in length ({d} vs {})",
            b.len()
        )));
    }
    Ok(match strategy {
        ShiftInit::Zeros => ParamVector::zeros(d),
        ShiftInit::Mean => {
            let mut sum = ParamVector::zeros(d);
            for b in base_encoders {
                sum.add_assign(b)?;
            }
            let n = base_encoders.len() as f64;
            sum.as_slice().iter().map(|s| s / n).collect::<Vec<_>>().into()
        }
        ShiftInit::RandomBinary => {
            let mut rng = stream(seed, Purpose::ShiftInit, 0, 0);
            (0..d)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                .collect::<Vec<_>>()
                .into()
        }
    })
}

/// `n` frozen encoders sharing one trainable shift, each with its own head.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedEnsemble {
    spec: NetSpec,
    base_encoders: Vec<ParamVector>,
    shift: ParamVector,
    heads: Vec<ParamVector>,
}

impl ShiftedEnsemble {
    pub fn new(
        spec: NetSpec,
        base_encoders: Vec<ParamVector>,
        shift: ParamVector,
        heads: Vec<ParamVector>,
    ) -> Result<Self> {
        if base_encoders.len() < 2 {
            return Err(Error::Input(format!(
                "a shifted ensemble needs at least 2 members, got {}",
                base_encoders.len()
            )));
        }
        if heads.len() != base_encoders.len() {
            return Err(Error::Shape(format!(
                "{} heads for {} encoders",
                heads.len(),
                base_encoders.len()
            )));
        }
        let enc = spec.encoder_len();
        if shift.len() != enc || base_encoders.iter().any(|b| b.len() != enc) {
            return Err(Error::Shape(format!(
                "encoders and shift must all have length {enc}"
            )));
        }
        if heads.iter().any(|h| h.len() != spec.head_len()) {
            return Err(Error::Shape(format!(
                "heads must have length {}",
                spec.head_len()
            )));
        }
        Ok(Self {
            spec,
            base_encoders,
            shift,
            heads,
        })
    }

    /// Freezes the encoders of `models` and initializes the shift.
    pub fn from_models(models: &[Model], init: ShiftInit, seed: u64) -> Result<Self> {
        let spec = models
            .first()
            .ok_or_else(|| Error::Input("no models".into()))?
            .spec()
            .clone();
        if let Some(m) = models.iter().find(|m| m.spec() != &spec) {
            return Err(Error::SpecMismatch {
                expected: spec.layer_sizes().to_vec(),
                found: m.spec().layer_sizes().to_vec(),
            });
        }
        let bases: Vec<ParamVector> = models.iter().map(|m| m.encoder().clone()).collect();
        let shift = init_shift(init, &bases, seed)?;
        let heads = models.iter().map(|m| m.head().clone()).collect();
        Self::new(spec, bases, shift, heads)
    }

    pub fn n(&self) -> usize {
        self.base_encoders.len()
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn base_encoders(&self) -> &[ParamVector] {
        &self.base_encoders
    }

    pub fn shift(&self) -> &ParamVector {
        &self.shift
    }

    pub fn heads(&self) -> &[ParamVector] {
        &self.heads
    }

    pub(crate) fn shift_mut(&mut self) -> &mut ParamVector {
        &mut self.shift
    }

    pub(crate) fn head_mut(&mut self, i: usize) -> &mut ParamVector {
        &mut self.heads[i]
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(Error::Input(format!(
                "model index {i} out of range for {} members",
                self.n()
            )));
        }
        Ok(())
    }

    /// `w_i + v`.
    pub fn effective_encoder(&self, i: usize) -> Result<ParamVector> {
        self.check_index(i)?;
        self.base_encoders[i].add(&self.shift)
    }

    /// Full parameters of member `i` at the current shift.
    pub fn member_params(&self, i: usize) -> Result<ParamVector> {
        Ok(self.effective_encoder(i)?.concat(&self.heads[i]))
    }

    /// Member `i` as an independent model at the current shift.
    pub fn member(&self, i: usize) -> Result<Model> {
        Model::new(self.spec.clone(), self.effective_encoder(i)?, self.heads[i].clone())
    }

    /// Bakes `v` into every encoder and returns independent copies.
    pub fn materialize(&self) -> Vec<Model> {
        (0..self.n())
            .map(|i| self.member(i).expect("index in range"))
            .collect()
    }
}
