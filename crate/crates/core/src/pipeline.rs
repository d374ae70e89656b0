//! The method ladder and the glue that turns a labeled dataset into a
//! ready-to-run predictor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aio_hmm::{fit_per_maneuver, EmConfig, Variant};
use crate::anticipation::{HmmPredictor, Predictor, RnnPredictor};
use crate::error::{Error, Result};
use crate::features::Standardizer;
use crate::fusion::{Arch, FusionRnnModel};
use crate::numerics::Rng;
use crate::sample::{filter_to, stream_dims, EventSet, SequenceSample, Setting};
use crate::training::{augment, train, Example, LossMode, ModelSpec, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Fusion RNN, exponential loss.
    FrnnEl,
    /// Fusion RNN, uniform loss.
    FrnnUl,
    /// Single RNN over concatenated streams, exponential loss.
    Srnn,
    #[serde(rename = "aiohmm")]
    AioHmm,
    #[serde(rename = "iohmm")]
    IoHmm,
    Hmm,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::FrnnEl, Method::FrnnUl, Method::Srnn, Method::AioHmm, Method::IoHmm, Method::Hmm];

    pub fn name(self) -> &'static str {
        match self {
            Method::FrnnEl => "frnn-el",
            Method::FrnnUl => "frnn-ul",
            Method::Srnn => "srnn",
            Method::AioHmm => "aiohmm",
            Method::IoHmm => "iohmm",
            Method::Hmm => "hmm",
        }
    }

    pub fn is_rnn(self) -> bool {
        matches!(self, Method::FrnnEl | Method::FrnnUl | Method::Srnn)
    }

    pub fn arch(self) -> Option<Arch> {
        match self {
            Method::FrnnEl | Method::FrnnUl => Some(Arch::Fusion),
            Method::Srnn => Some(Arch::Concat),
            _ => None,
        }
    }

    pub fn loss_mode(self) -> Option<LossMode> {
        match self {
            Method::FrnnEl | Method::Srnn => Some(LossMode::Exponential),
            Method::FrnnUl => Some(LossMode::Uniform),
            _ => None,
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::AioHmm => Some(Variant::Aio),
            Method::IoHmm => Some(Variant::Io),
            Method::Hmm => Some(Variant::Hmm),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method {s:?}")))
    }
}

/// Everything needed to retrain an RNN predictor from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnSettings {
    pub method: Method,
    pub setting: Setting,
    pub spec: ModelSpec,
    pub train: TrainConfig,
}

impl RnnSettings {
    pub fn new(method: Method, setting: Setting, hidden: usize, train: TrainConfig) -> Result<Self> {
        let (Some(arch), Some(loss_mode)) = (method.arch(), method.loss_mode()) else {
            return Err(Error::Config(format!("{method} is not an RNN method")));
        };
        Ok(RnnSettings {
            method,
            setting,
            spec: ModelSpec {
                arch,
                hidden,
                fusion_width: hidden,
            },
            train: TrainConfig { loss_mode, ..train },
        })
    }
}

/// Everything needed to refit an HMM ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmSettings {
    pub method: Method,
    pub setting: Setting,
    pub em: EmConfig,
    /// Candidate state counts; a single entry skips the search.
    pub state_grid: Vec<usize>,
    pub cv_folds: usize,
    /// State count chosen for each event, filled in after fitting.
    #[serde(default)]
    pub chosen_states: Vec<usize>,
}

impl HmmSettings {
    pub fn new(method: Method, setting: Setting, em: EmConfig) -> Result<Self> {
        let Some(variant) = method.variant() else {
            return Err(Error::Config(format!("{method} is not an HMM method")));
        };
        Ok(HmmSettings {
            method,
            setting,
            em: EmConfig { variant, ..em },
            state_grid: vec![2, 3, 4, 6],
            cv_folds: 3,
            chosen_states: Vec::new(),
        })
    }
}

fn examples(data: &[SequenceSample], events: &EventSet, x_norm: &Standardizer) -> Result<Vec<Example>> {
    data.iter()
        .map(|s| {
            let target = events
                .index_of(s.label)
                .ok_or_else(|| Error::Invalid(format!("sample {} has label {} outside the event set", s.id, s.label)))?;
            Ok(Example {
                xs: x_norm.apply_seq(&s.xs),
                zs: s.zs.clone(),
                target,
            })
        })
        .collect()
}

/// Scales x on the raw training data, augments, initializes and trains.
pub fn fit_rnn(data: &[SequenceSample], settings: &RnnSettings) -> Result<(RnnPredictor, TrainReport)> {
    let events = EventSet::for_setting(settings.setting);
    let data = filter_to(data, &events);
    let (x_dim, z_dim) = stream_dims(&data)?;
    let x_norm = Standardizer::fit(&data, |s| &s.xs)?;
    let cfg = &settings.train;
    let mut root = Rng::new(cfg.seed);
    let mut init_rng = root.fork();
    let aug_seed = root.next_u64();
    let augmented = augment(&data, cfg.augmentation_factor, aug_seed)?;
    let ex = examples(&augmented, &events, &x_norm)?;
    let dims = settings.spec.dims(x_dim, z_dim, events.len());
    let model = FusionRnnModel::init(settings.spec.arch, dims, &mut init_rng)?;
    log::info!(
        "training {} on {} sequences ({} after augmentation), {} parameters",
        settings.method,
        data.len(),
        augmented.len(),
        model.param_count().total
    );
    let report = train(&ex, model, cfg)?;
    Ok((
        RnnPredictor {
            model: report.model.clone(),
            events,
            x_norm,
        },
        report,
    ))
}

/// Log-likelihood traces of each event's final EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmFitReport {
    pub states: Vec<usize>,
    pub traces: Vec<Vec<f64>>,
}

impl HmmFitReport {
    /// `event,iteration,loglik` rows.
    pub fn trace_csv(&self, events: &EventSet) -> String {
        let mut s = String::from("event,iteration,loglik\n");
        for (m, trace) in events.events().iter().zip(&self.traces) {
            for (i, l) in trace.iter().enumerate() {
                s.push_str(&format!("{m},{i},{l}\n"));
            }
        }
        s
    }
}

pub fn fit_hmm(data: &[SequenceSample], settings: &HmmSettings) -> Result<(HmmPredictor, HmmFitReport, HmmSettings)> {
    let events = EventSet::for_setting(settings.setting);
    let data = filter_to(data, &events);
    let x_norm = Standardizer::fit(&data, |s| &s.xs)?;
    let scaled: Vec<SequenceSample> = data
        .iter()
        .map(|s| SequenceSample {
            xs: x_norm.apply_seq(&s.xs),
            ..s.clone()
        })
        .collect();
    let (hmms, states, traces) = fit_per_maneuver(&scaled, &events, &settings.em, &settings.state_grid, settings.cv_folds)?;
    log::info!("fitted {} with states {:?}", settings.method, states);
    let resolved = HmmSettings {
        chosen_states: states.clone(),
        ..settings.clone()
    };
    Ok((HmmPredictor { hmms, x_norm }, HmmFitReport { states, traces }, resolved))
}

/// Settings of either family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Settings {
    Rnn(RnnSettings),
    Hmm(HmmSettings),
}

impl Settings {
    pub fn method(&self) -> Method {
        match self {
            Settings::Rnn(s) => s.method,
            Settings::Hmm(s) => s.method,
        }
    }
}

/// Trains whichever family `settings` describes and boxes the result.
pub fn fit_predictor(data: &[SequenceSample], settings: &Settings) -> Result<Box<dyn Predictor>> {
    Ok(match settings {
        Settings::Rnn(s) => Box::new(fit_rnn(data, s)?.0),
        Settings::Hmm(s) => Box::new(fit_hmm(data, s)?.0),
    })
}
