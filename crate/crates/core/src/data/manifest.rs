//! Plain-text dataset manifests.
//!
//! One `key = value` pair per line; `#` starts a comment. Example:
//!
//! ```text
//! name = enginefaultdb
//! path = EngineFaultDB.csv
//! columns = MAP:continuous, TPS:continuous, Force:continuous
//! label = Fault
//! classes = normal, rich_mixture, lean_mixture, low_voltage
//! window = 1
//! split = 8:2
//! ```
//!
//! Synthetic sources replace `path`/`columns` with `source = synth-temporal`
//! or `source = synth-tabular` plus `synth.*` keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::split::{SplitConfig, SplitUnit};
use super::synth::{synth_tabular, synth_temporal, TabularSynth, TemporalSynth};
use super::table::{load_csv, DatasetTable, Feature, FeatureKind, Schema};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Source {
    Csv { path: PathBuf, schema: Schema },
    SynthTemporal(TemporalSynth),
    SynthTabular(TabularSynth),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub source: Source,
    pub window: usize,
    /// Defaults to the window length (non-overlapping windows).
    pub stride: Option<usize>,
    /// Ratio, stratification and unit; the seed is supplied per run.
    pub split: SplitConfig,
    pub cap_per_class: Option<usize>,
}

impl Manifest {
    pub fn new(name: impl Into<String>, source: Source) -> Self {
        Self {
            name: name.into(),
            source,
            window: 1,
            stride: None,
            split: SplitConfig::default(),
            cap_per_class: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses manifest text; relative data paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line {}: expected key = value", n + 1)))?;
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("manifest line {}: duplicate key {}", n + 1, k.trim())));
            }
        }
        let mut kv = Keys(kv);
        let source = match kv.take("source").as_deref().unwrap_or("csv") {
            "csv" => parse_csv_source(&mut kv, base)?,
            "synth-temporal" => {
                let d = TemporalSynth::default();
                Source::SynthTemporal(TemporalSynth {
                    seed: kv.num("synth.seed", d.seed)?,
                    features: kv.num("synth.features", d.features)?,
                    classes: kv.num("synth.classes", d.classes)?,
                    records_per_class: kv.num("synth.records_per_class", d.records_per_class)?,
                    record_len: kv.num("synth.record_len", d.record_len)?,
                    noise: kv.num("synth.noise", d.noise)?,
                    base_period: kv.num("synth.base_period", d.base_period)?,
                    period_step: kv.num("synth.period_step", d.period_step)?,
                    trend: kv.num("synth.trend", d.trend)?,
                })
            }
            "synth-tabular" => {
                let d = TabularSynth::default();
                Source::SynthTabular(TabularSynth {
                    seed: kv.num("synth.seed", d.seed)?,
                    features: kv.num("synth.features", d.features)?,
                    classes: kv.num("synth.classes", d.classes)?,
                    rows: kv.num("synth.rows", d.rows)?,
                    noise: kv.num("synth.noise", d.noise)?,
                })
            }
            other => return Err(Error::Config(format!("unknown source {other:?}"))),
        };
        let mut m = Manifest::new(kv.take("name").unwrap_or_else(|| "dataset".into()), source);
        m.window = kv.num("window", 1)?;
        m.stride = kv.take("stride").map(|s| parse_num("stride", &s)).transpose()?;
        if let Some(r) = kv.take("split") {
            let (a, b) = r
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("split ratio {r:?} should look like 8:2")))?;
            m.split.train = parse_num("split", a.trim())?;
            m.split.test = parse_num("split", b.trim())?;
        }
        m.split.stratify = kv.bool("stratify", true)?;
        m.split.unit = match kv.take("split_unit").as_deref().unwrap_or("window") {
            "window" => SplitUnit::Window,
            "block" => SplitUnit::Block {
                windows: kv.num("block_windows", 4)?,
            },
            other => return Err(Error::Config(format!("unknown split_unit {other:?}"))),
        };
        m.cap_per_class = kv.take("cap_per_class").map(|s| parse_num("cap_per_class", &s)).transpose()?;
        if let Some(k) = kv.0.keys().next() {
            return Err(Error::Config(format!("unknown manifest key {k:?}")));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == Some(0) {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        self.split.validate()
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.window)
    }

    /// Loads or generates the full table.
    pub fn load_table(&self) -> Result<DatasetTable> {
        match &self.source {
            Source::Csv { path, schema } => load_csv(path, schema),
            Source::SynthTemporal(cfg) => synth_temporal(cfg),
            Source::SynthTabular(cfg) => synth_tabular(cfg),
        }
    }

    /// Renders the manifest back to text (CSV sources only, with the data
    /// path written relative to nothing, i.e. as stored).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        match &self.source {
            Source::Csv { path, schema } => {
                let _ = writeln!(s, "path = {}", path.display());
                let cols: Vec<String> = schema
                    .features
                    .iter()
                    .map(|f| {
                        let kind = match f.kind {
                            FeatureKind::Continuous => "continuous",
                            FeatureKind::Categorical => "categorical",
                        };
                        format!("{}:{kind}", f.name)
                    })
                    .collect();
                let _ = writeln!(s, "columns = {}", cols.join(", "));
                for f in schema.features.iter().filter(|f| f.is_categorical() && !f.levels.is_empty()) {
                    let _ = writeln!(s, "levels.{} = {}", f.name, f.levels.join(", "));
                }
                let _ = writeln!(s, "label = {}", schema.label);
                if let Some(c) = &schema.classes {
                    let _ = writeln!(s, "classes = {}", c.join(", "));
                }
                if let Some(r) = &schema.record {
                    let _ = writeln!(s, "record = {r}");
                }
            }
            Source::SynthTemporal(c) => {
                let _ = writeln!(s, "source = synth-temporal");
                let _ = writeln!(
                    s,
                    "synth.seed = {}\nsynth.features = {}\nsynth.classes = {}\nsynth.records_per_class = {}\nsynth.record_len = {}\nsynth.noise = {}\nsynth.base_period = {}\nsynth.period_step = {}\nsynth.trend = {}",
                    c.seed, c.features, c.classes, c.records_per_class, c.record_len, c.noise, c.base_period, c.period_step, c.trend
                );
            }
            Source::SynthTabular(c) => {
                let _ = writeln!(s, "source = synth-tabular");
                let _ = writeln!(
                    s,
                    "synth.seed = {}\nsynth.features = {}\nsynth.classes = {}\nsynth.rows = {}\nsynth.noise = {}",
                    c.seed, c.features, c.classes, c.rows, c.noise
                );
            }
        }
        let _ = writeln!(s, "window = {}", self.window);
        if let Some(st) = self.stride {
            let _ = writeln!(s, "stride = {st}");
        }
        let _ = writeln!(s, "split = {}:{}", self.split.train, self.split.test);
        let _ = writeln!(s, "stratify = {}", self.split.stratify);
        match self.split.unit {
            SplitUnit::Window => {
                let _ = writeln!(s, "split_unit = window");
            }
            SplitUnit::Block { windows } => {
                let _ = writeln!(s, "split_unit = block\nblock_windows = {windows}");
            }
        }
        if let Some(c) = self.cap_per_class {
            let _ = writeln!(s, "cap_per_class = {c}");
        }
        s
    }
}

fn parse_csv_source(kv: &mut Keys, base: &Path) -> Result<Source> {
    let path = kv
        .take("path")
        .ok_or_else(|| Error::Config("manifest needs a path".into()))?;
    let path = base.join(path);
    let columns = kv
        .take("columns")
        .ok_or_else(|| Error::Config("manifest needs columns".into()))?;
    let mut features = Vec::new();
    for spec in list(&columns) {
        let (name, kind) = spec.split_once(':').unwrap_or((spec.as_str(), "continuous"));
        let name = name.trim();
        let feature = match kind.trim() {
            "continuous" => Feature::continuous(name),
            "categorical" => Feature::categorical(name, kv.take(&format!("levels.{name}")).map(|l| list(&l)).unwrap_or_default()),
            other => return Err(Error::Config(format!("column {name}: unknown kind {other:?}"))),
        };
        features.push(feature);
    }
    let schema = Schema {
        features,
        label: kv
            .take("label")
            .ok_or_else(|| Error::Config("manifest needs a label column".into()))?,
        classes: kv.take("classes").map(|c| list(&c)),
        record: kv.take("record"),
    };
    Ok(Source::Csv { path, schema })
}

fn list(s: &str) -> Vec<String> {
    s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

struct Keys(BTreeMap<String, String>);

impl Keys {
    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        self.take(key).map_or(Ok(default), |v| parse_num(key, &v))
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key).as_deref() {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engine_fault_manifest() {
        let cols: Vec<String> = (0..14).map(|i| format!("v{i}:continuous")).collect();
        let text = format!(
            "# EngineFaultDB\nname = efdb\npath = efdb.csv\ncolumns = {}\nlabel = Fault\nclasses = 0,1,2,3\nwindow = 1\nsplit = 8:2\n",
            cols.join(", ")
        );
        let m = Manifest::parse(&text, Path::new("/data")).unwrap();
        let Source::Csv { path, schema } = &m.source else { panic!() };
        assert_eq!(path, Path::new("/data/efdb.csv"));
        assert_eq!(schema.features.len(), 14);
        assert_eq!(schema.classes.as_ref().unwrap().len(), 4);
        assert_eq!((m.split.train, m.split.test), (8, 2));
        assert_eq!(m.stride(), 1);
    }

    #[test]
    fn synthetic_round_trip_through_text() {
        let mut m = Manifest::new(
            "t",
            Source::SynthTemporal(TemporalSynth {
                noise: 0.25,
                ..TemporalSynth::default()
            }),
        );
        m.window = 16;
        m.split.unit = SplitUnit::Block { windows: 3 };
        m.cap_per_class = Some(500);
        let back = Manifest::parse(&m.to_text(), Path::new(".")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_unknown_and_malformed_keys() {
        assert!(Manifest::parse("source = synth-tabular\nwindw = 3\n", Path::new(".")).is_err());
        assert!(Manifest::parse("source = synth-tabular\nsplit = 82\n", Path::new(".")).is_err());
        assert!(Manifest::parse("source = synth-tabular\nwindow = 0\n", Path::new(".")).is_err());
        assert!(Manifest::parse("path = x.csv\nlabel = y\n", Path::new(".")).is_err());
    }

    #[test]
    fn categorical_levels_are_read() {
        let text = "path = a.csv\ncolumns = t:continuous, speed:categorical\nlevels.speed = low, medium, high\nlabel = y\n";
        let m = Manifest::parse(text, Path::new(".")).unwrap();
        let Source::Csv { schema, .. } = &m.source else { panic!() };
        assert_eq!(schema.features[1].levels, vec!["low", "medium", "high"]);
    }
}
