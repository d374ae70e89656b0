//! On-disk formats: JSONL datasets and frame records, versioned JSON
//! checkpoints.
//!
//! Floats go through `serde_json` with shortest round-trip printing and exact
//! parsing, so every value read back is the identical `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::anticipation::{HmmPredictor, Predictor, RnnPredictor};
use crate::error::{Error, Result};
use crate::features::{FrameMotion, HEAD_POSE_DIM, HISTOGRAM_DIM, OUTSIDE_DIM};
use crate::pipeline::{HmmSettings, Method, RnnSettings, Settings};
use crate::sample::{Maneuver, SequenceSample};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    x: Vec<f64>,
    z: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    label: String,
    steps: Vec<StepRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<Value>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn check_sample(s: &SequenceSample, z_dim: &mut Option<usize>, line: usize) -> Result<()> {
    if s.xs.is_empty() {
        return Err(parse_err(line, format!("sample {:?} has no steps", s.id)));
    }
    if s.xs.len() != s.zs.len() {
        return Err(parse_err(line, format!("sample {:?} has ragged streams", s.id)));
    }
    for (t, (x, z)) in s.xs.iter().zip(&s.zs).enumerate() {
        if x.len() != OUTSIDE_DIM {
            return Err(parse_err(line, format!("step {t}: x has length {}, expected {OUTSIDE_DIM}", x.len())));
        }
        if z.len() != HISTOGRAM_DIM && z.len() != HEAD_POSE_DIM {
            return Err(parse_err(
                line,
                format!("step {t}: z has length {}, expected {HISTOGRAM_DIM} or {HEAD_POSE_DIM}", z.len()),
            ));
        }
        match *z_dim {
            None => *z_dim = Some(z.len()),
            Some(d) if d != z.len() => {
                return Err(parse_err(line, format!("step {t}: z has length {}, file uses {d}", z.len())));
            }
            Some(_) => {}
        }
        if x.iter().chain(z).any(|v| !v.is_finite()) {
            return Err(parse_err(line, format!("step {t}: non-finite feature value")));
        }
    }
    Ok(())
}

fn lines(reader: impl BufRead) -> impl Iterator<Item = Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)).map_err(Error::from))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()))
}

/// Parses JSONL samples. Blank lines are skipped.
pub fn read_dataset(reader: impl BufRead) -> Result<Vec<SequenceSample>> {
    let mut z_dim = None;
    let mut out = Vec::new();
    for item in lines(reader) {
        let (line, text) = item?;
        let rec: SampleRecord = serde_json::from_str(&text).map_err(|e| parse_err(line, e.to_string()))?;
        let label: Maneuver = rec.label.parse().map_err(|e: Error| parse_err(line, e.to_string()))?;
        let (xs, zs) = rec.steps.into_iter().map(|s| (s.x, s.z)).unzip();
        let sample = SequenceSample {
            id: rec.id,
            xs,
            zs,
            label,
            meta: rec.meta,
        };
        check_sample(&sample, &mut z_dim, line)?;
        out.push(sample);
    }
    Ok(out)
}

/// Writes one JSON object per sample; the same validation as reading
/// applies, with the sample's 1-based position as the line number.
pub fn write_dataset(mut writer: impl Write, dataset: &[SequenceSample]) -> Result<()> {
    let mut z_dim = None;
    for (i, s) in dataset.iter().enumerate() {
        check_sample(s, &mut z_dim, i + 1)?;
        let rec = SampleRecord {
            id: s.id.clone(),
            label: s.label.name().to_string(),
            steps: s
                .xs
                .iter()
                .zip(&s.zs)
                .map(|(x, z)| StepRecord { x: x.clone(), z: z.clone() })
                .collect(),
            meta: s.meta.clone(),
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SequenceSample>> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn save_dataset(dataset: &[SequenceSample], path: impl AsRef<Path>) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), dataset)
}

/// One `{"x": [...], "z": [...]}` observation, as streamed to a predictor.
pub fn parse_step(line: usize, text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let rec: StepRecord = serde_json::from_str(text).map_err(|e| parse_err(line, e.to_string()))?;
    let probe = SequenceSample {
        id: String::new(),
        xs: vec![rec.x],
        zs: vec![rec.z],
        label: Maneuver::Straight,
        meta: None,
    };
    check_sample(&probe, &mut None, line)?;
    let SequenceSample { mut xs, mut zs, .. } = probe;
    Ok((xs.remove(0), zs.remove(0)))
}

/// Step records, one per non-blank line.
pub fn read_steps(reader: impl BufRead) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    lines(reader)
        .map(|item| item.and_then(|(line, text)| parse_step(line, &text)))
        .collect()
}

/// One `FrameMotion` object per line.
pub fn read_frames(reader: impl BufRead) -> Result<Vec<FrameMotion>> {
    let mut out = Vec::new();
    for item in lines(reader) {
        let (line, text) = item?;
        let fm: FrameMotion = serde_json::from_str(&text).map_err(|e| parse_err(line, e.to_string()))?;
        let values = fm
            .matches
            .iter()
            .flat_map(|m| [m.dx, m.dy])
            .chain(fm.center_motion)
            .chain(fm.pose.into_iter().flatten());
        if values.into_iter().any(|v| !v.is_finite()) {
            return Err(parse_err(line, "non-finite motion value"));
        }
        out.push(fm);
    }
    Ok(out)
}

pub fn load_frames(path: impl AsRef<Path>) -> Result<Vec<FrameMotion>> {
    read_frames(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    FusionRnn,
    AioHmm,
}

impl CheckpointKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::FusionRnn => "fusion_rnn",
            CheckpointKind::AioHmm => "aio_hmm",
        }
    }

    pub fn for_method(m: Method) -> Self {
        if m.is_rnn() {
            CheckpointKind::FusionRnn
        } else {
            CheckpointKind::AioHmm
        }
    }
}

/// A trained predictor together with the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Rnn {
        settings: RnnSettings,
        predictor: RnnPredictor,
    },
    Hmm {
        settings: HmmSettings,
        predictor: HmmPredictor,
    },
}

#[derive(Serialize)]
struct Envelope<'a, C: Serialize, P: Serialize> {
    format_version: u64,
    kind: CheckpointKind,
    config: &'a C,
    params: &'a P,
}

/// `serde_json` writes non-finite floats as `null`, so a null anywhere in
/// the parameters means the model held a NaN or infinity.
fn reject_nulls(v: &Value, path: &mut String) -> Result<()> {
    match v {
        Value::Null => Err(Error::Checkpoint(format!("non-finite parameter at {path}"))),
        Value::Array(items) => items.iter().enumerate().try_for_each(|(i, x)| {
            let len = path.len();
            path.push_str(&format!("[{i}]"));
            reject_nulls(x, path)?;
            path.truncate(len);
            Ok(())
        }),
        Value::Object(map) => map.iter().try_for_each(|(k, x)| {
            let len = path.len();
            path.push('.');
            path.push_str(k);
            reject_nulls(x, path)?;
            path.truncate(len);
            Ok(())
        }),
        _ => Ok(()),
    }
}

fn envelope<C: Serialize, P: Serialize>(kind: CheckpointKind, config: &C, params: &P) -> Result<Value> {
    let params_value = serde_json::to_value(params)?;
    reject_nulls(&params_value, &mut String::from("params"))?;
    Ok(serde_json::to_value(Envelope {
        format_version: FORMAT_VERSION,
        kind,
        config,
        params: &params_value,
    })?)
}

impl Checkpoint {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            Checkpoint::Rnn { .. } => CheckpointKind::FusionRnn,
            Checkpoint::Hmm { .. } => CheckpointKind::AioHmm,
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Checkpoint::Rnn { settings, .. } => settings.method,
            Checkpoint::Hmm { settings, .. } => settings.method,
        }
    }

    pub fn settings(&self) -> Settings {
        match self {
            Checkpoint::Rnn { settings, .. } => Settings::Rnn(settings.clone()),
            Checkpoint::Hmm { settings, .. } => Settings::Hmm(settings.clone()),
        }
    }

    pub fn predictor(&self) -> &dyn Predictor {
        match self {
            Checkpoint::Rnn { predictor, .. } => predictor,
            Checkpoint::Hmm { predictor, .. } => predictor,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Checkpoint::Rnn { settings, predictor } => {
                settings.train.validate()?;
                predictor.model.validate()?;
                if predictor.model.arch != settings.spec.arch {
                    return Err(Error::Checkpoint("model architecture disagrees with its config".into()));
                }
                Ok(())
            }
            Checkpoint::Hmm { predictor, .. } => predictor.hmms.validate(),
        }
    }

    pub fn to_value(&self) -> Result<Value> {
        self.validate()?;
        match self {
            Checkpoint::Rnn { settings, predictor } => envelope(self.kind(), settings, predictor),
            Checkpoint::Hmm { settings, predictor } => envelope(self.kind(), settings, predictor),
        }
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let Value::Object(mut map) = v else {
            return Err(Error::Checkpoint("expected a JSON object".into()));
        };
        match map.get("format_version").and_then(Value::as_u64) {
            Some(FORMAT_VERSION) => {}
            Some(other) => return Err(Error::Checkpoint(format!("unsupported format_version {other}"))),
            None => return Err(Error::Checkpoint("missing format_version".into())),
        }
        let kind: CheckpointKind = serde_json::from_value(map.remove("kind").unwrap_or(Value::Null))
            .map_err(|e| Error::Checkpoint(format!("kind: {e}")))?;
        let config = map
            .remove("config")
            .ok_or_else(|| Error::Checkpoint("missing config".into()))?;
        let params = map
            .remove("params")
            .ok_or_else(|| Error::Checkpoint("missing params".into()))?;
        let ckpt = match kind {
            CheckpointKind::FusionRnn => Checkpoint::Rnn {
                settings: serde_json::from_value(config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?,
                predictor: serde_json::from_value(params).map_err(|e| Error::Checkpoint(format!("params: {e}")))?,
            },
            CheckpointKind::AioHmm => Checkpoint::Hmm {
                settings: serde_json::from_value(config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?,
                predictor: serde_json::from_value(params).map_err(|e| Error::Checkpoint(format!("params: {e}")))?,
            },
        };
        if CheckpointKind::for_method(ckpt.method()) != kind {
            return Err(Error::Checkpoint(format!(
                "method {} cannot be stored as a {} checkpoint",
                ckpt.method(),
                kind.name()
            )));
        }
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_value()?)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Checkpoint::from_value(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = self.to_json()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads and insists on a particular kind.
    pub fn load_kind(path: impl AsRef<Path>, kind: CheckpointKind) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind() != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {} checkpoint, found {}",
                kind.name(),
                ckpt.kind().name()
            )));
        }
        Ok(ckpt)
    }
}

/// Reads only the `kind` field, for callers deciding whether a path may be
/// overwritten.
pub fn peek_kind(path: impl AsRef<Path>) -> Result<CheckpointKind> {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    serde_json::from_value(v.get("kind").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Checkpoint(format!("kind: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aio_hmm::EmConfig;
    use crate::pipeline::{fit_hmm, fit_rnn};
    use crate::sample::Setting;
    use crate::synth::{generate, ScenarioConfig};
    use crate::training::TrainConfig;

    fn small_data(n: usize) -> Vec<SequenceSample> {
        generate(&ScenarioConfig::default(), n).unwrap()
    }

    fn rnn_checkpoint() -> Checkpoint {
        rnn_checkpoint_for(Method::FrnnEl)
    }

    fn rnn_checkpoint_for(method: Method) -> Checkpoint {
        let train = TrainConfig {
            epochs: 1,
            learning_rate: 1e-2,
            seed: 2,
            ..Default::default()
        };
        let settings = RnnSettings::new(method, Setting::All, 4, train).unwrap();
        let (predictor, _) = fit_rnn(&small_data(20), &settings).unwrap();
        Checkpoint::Rnn { settings, predictor }
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let mut data = small_data(12);
        data[0].xs[0][0] = 0.1 + 0.2;
        data[1].zs[0][3] = f64::MIN_POSITIVE;
        data[2].meta = Some(serde_json::json!({"note": "kept"}));
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, data);
        for (a, b) in back.iter().zip(&data) {
            for (u, v) in a.xs.iter().flatten().zip(b.xs.iter().flatten()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn empty_and_blank_files_are_empty_datasets() {
        assert!(read_dataset(&b""[..]).unwrap().is_empty());
        assert!(read_dataset(&b"\n  \n"[..]).unwrap().is_empty());
    }

    fn line_of(err: Error) -> usize {
        match err {
            Error::Parse { line, .. } => line,
            other => panic!("expected a parse error, got {other}"),
        }
    }

    #[test]
    fn bad_records_name_their_line() {
        let good = r#"{"id":"a","label":"straight","steps":[{"x":[0,0,0,0,0,0],"z":[1,0,0,0,0,0,0,0,0]}]}"#;
        let short_z = r#"{"id":"b","label":"left_turn","steps":[{"x":[0,0,0,0,0,0],"z":[1,0,0,0,0,0,0]}]}"#;
        let text = format!("{good}\n\n{short_z}\n");
        let err = read_dataset(text.as_bytes()).unwrap_err();
        assert_eq!(line_of(err), 3);

        let label = good.replace("straight", "u_turn");
        assert_eq!(line_of(read_dataset(format!("{good}\n{label}").as_bytes()).unwrap_err()), 2);

        assert_eq!(line_of(read_dataset(&b"{not json"[..]).unwrap_err()), 1);

        let pose = good.replace("[1,0,0,0,0,0,0,0,0]", "[1,0,0,0,0,0,0,0,0,0,0,0]");
        assert!(read_dataset(pose.as_bytes()).is_ok());
        assert_eq!(line_of(read_dataset(format!("{good}\n{pose}").as_bytes()).unwrap_err()), 2);
    }

    #[test]
    fn step_records_parse() {
        let text = "{\"x\":[1,2,3,4,5,6],\"z\":[0,0,0,0,1,0,0,0,0]}\n\n{\"x\":[1],\"z\":[]}\n";
        assert_eq!(line_of(read_steps(text.as_bytes()).unwrap_err()), 3);
        let (x, z) = parse_step(1, text.lines().next().unwrap()).unwrap();
        assert_eq!(x[5], 6.0);
        assert_eq!(z[4], 1.0);
    }

    #[test]
    fn frame_records_parse() {
        let text = "{\"matches\":[{\"dx\":1.5,\"dy\":-2}],\"center_motion\":[0.5,0]}\n\
                    {\"matches\":[],\"center_motion\":[0,0],\"pose\":[0.1,0,0]}\n";
        let frames = read_frames(text.as_bytes()).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].matches[0].dy, -2.0);
        assert_eq!(frames[1].pose, Some([0.1, 0.0, 0.0]));
        assert_eq!(line_of(read_frames(&b"\n{\"matches\":[]}"[..]).unwrap_err()), 2);
    }

    #[test]
    fn rnn_checkpoint_round_trip_is_exact() {
        for method in [Method::FrnnEl, Method::Srnn] {
            let ckpt = rnn_checkpoint_for(method);
            let json = ckpt.to_json().unwrap();
            let back = Checkpoint::from_json(&json).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(back.to_json().unwrap(), json);
        }
    }

    #[test]
    fn hmm_checkpoint_round_trip_is_exact() {
        let em = EmConfig {
            max_iter: 3,
            ..Default::default()
        };
        let mut settings = HmmSettings::new(Method::AioHmm, Setting::Lane, em).unwrap();
        settings.state_grid = vec![2];
        let (predictor, _, settings) = fit_hmm(&small_data(30), &settings).unwrap();
        let ckpt = Checkpoint::Hmm { settings, predictor };
        let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn unknown_version_and_wrong_kind_are_rejected() {
        let mut v = rnn_checkpoint().to_value().unwrap();
        v["format_version"] = 99.into();
        assert!(matches!(Checkpoint::from_value(v.clone()), Err(Error::Checkpoint(_))));
        v["format_version"] = 1.into();
        v["kind"] = "aio_hmm".into();
        assert!(Checkpoint::from_value(v).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        rnn_checkpoint().save(&path).unwrap();
        assert_eq!(peek_kind(&path).unwrap(), CheckpointKind::FusionRnn);
        assert!(Checkpoint::load_kind(&path, CheckpointKind::AioHmm).is_err());
        assert!(Checkpoint::load_kind(&path, CheckpointKind::FusionRnn).is_ok());
    }

    #[test]
    fn nan_parameter_refuses_to_save() {
        let mut ckpt = rnn_checkpoint();
        if let Checkpoint::Rnn { predictor, .. } = &mut ckpt {
            predictor.x_norm.mean[2] = f64::NAN;
        }
        let err = ckpt.to_json().unwrap_err();
        assert!(err.to_string().contains("params.x_norm.mean[2]"), "{err}");
    }
}
