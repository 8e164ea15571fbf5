//! Flat `key = value` run configuration.
//!
//! One entry per line, `#` starts a comment, keys are namespaced by section
//! (`train.k`, `model.K`, `vcd.rho`, ...). Unknown keys and duplicate keys
//! are errors. [`Config::to_text`] materializes every default so a run can
//! be reproduced from its snapshot alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{load_idx, synth, Dataset, SynthKind, SynthSpec};
use crate::error::{Error, Result};

/// Types that can appear on the right-hand side of a config line.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse().map_err(|_| Error::Config(format!("cannot parse {s:?} as {}", stringify!($t))))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
display_value!(usize, u64, f64, bool, String);

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| usize::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> Result<Self> {
        s.split(',').map(|p| f64::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
}

/// Half-open sample range `a..b`, or `all`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Span(pub Option<Range<usize>>);

impl Span {
    pub fn all() -> Self {
        Span(None)
    }
    pub fn of(r: Range<usize>) -> Self {
        Span(Some(r))
    }
    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        match &self.0 {
            None => Ok(d.clone()),
            Some(r) => d.subset(r.clone()),
        }
    }
}

impl ConfigValue for Span {
    fn parse_value(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Span(None));
        }
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| Error::Config(format!("range {s:?} must look like a..b or all")))?;
        let (a, b) = (usize::parse_value(a.trim())?, usize::parse_value(b.trim())?);
        if a >= b {
            return Err(Error::Config(format!("empty range {s:?}")));
        }
        Ok(Span(Some(a..b)))
    }
    fn render(&self) -> String {
        match &self.0 {
            None => "all".into(),
            Some(r) => format!("{}..{}", r.start, r.end),
        }
    }
}

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident = $text:literal),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($variant),* }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)*
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?}; expected one of: {}",
                        stringify!($name),
                        [$($text),*].join(", ")
                    ))),
                }
            }
        }

        impl ConfigValue for $name {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse()
            }
            fn render(&self) -> String {
                match self { $($name::$variant => $text.to_string()),* }
            }
        }
    };
}

keyword_enum!(
    /// Which training algorithm a run uses.
    LoopKind { Vgan = "vgan", Vcd = "vcd", Gan = "gan" }
);
keyword_enum!(
    /// Feature-network or decoder family.
    NetArch { Mlp = "mlp", Conv = "conv" }
);
keyword_enum!(
    /// Final generator nonlinearity; `auto` picks sigmoid for images, linear for points.
    OutputAct { Auto = "auto", Sigmoid = "sigmoid", Linear = "linear" }
);
keyword_enum!(
    /// Reconstruction term of the transition objective: squared norm per
    /// sample (`sum`) or squared error per pixel (`mean`), averaged over the batch.
    ReconNorm { Sum = "sum", Mean = "mean" }
);
keyword_enum!(
    DataSource { Ring = "ring", Grid = "grid", Idx = "idx" }
);

/// Key/value pairs awaiting consumption by the typed sections.
struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            if map.insert(key.clone(), (v.trim().to_string(), no + 1)).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", no + 1)));
            }
        }
        Ok(Self { map })
    }

    fn take<T: ConfigValue>(&mut self, key: &str, default: T) -> Result<T> {
        match self.map.remove(key) {
            None => Ok(default),
            Some((v, line)) => T::parse_value(&v).map_err(|e| Error::Config(format!("line {line}: {key}: {e}"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.into_iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::Config(format!("line {line}: unknown key {k}"))),
        }
    }
}

macro_rules! section {
    ($(#[$m:meta])* $name:ident, $prefix:literal { $($(#[$fm:meta])* $field:ident : $ty:ty = $default:expr, $key:literal;)* }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name { $($(#[$fm])* pub $field: $ty),* }

        impl Default for $name {
            fn default() -> Self {
                Self { $($field: $default),* }
            }
        }

        impl $name {
            fn read(e: &mut Entries) -> Result<Self> {
                let d = Self::default();
                Ok(Self { $($field: e.take(concat!($prefix, ".", $key), d.$field)?),* })
            }

            fn write(&self, out: &mut String) {
                $(let _ = writeln!(out, "{}.{} = {}", $prefix, $key, self.$field.render());)*
            }
        }
    };
}

section!(
    /// Loop and optimizer settings.
    TrainSection, "train" {
        kind: LoopKind = LoopKind::Vgan, "loop";
        /// Generator steps per outer iteration.
        k: usize = 1, "k";
        batch: usize = 64, "batch";
        epochs: usize = 1, "epochs";
        /// Cap on outer iterations across all epochs; 0 means no cap.
        max_iterations: usize = 0, "max_iterations";
        seed: u64 = 0, "seed";
        lr: f64 = 0.1, "lr";
        decay: f64 = 0.95, "decay";
        eps: f64 = 1e-6, "eps";
    }
);

section!(ModelSection, "model" {
    experts: usize = 100, "K";
});

section!(
    /// Feature network `φ` shared by the energy and the discriminator.
    EnergySection, "energy" {
        arch: NetArch = NetArch::Mlp, "arch";
        hidden: Vec<usize> = vec![128, 128], "hidden";
        channels: Vec<usize> = vec![8, 16], "channels";
        features: usize = 128, "features";
    }
);

section!(
    /// Direct generator `G(z)`.
    GenSection, "gen" {
        arch: NetArch = NetArch::Mlp, "arch";
        dz: usize = 16, "dz";
        hidden: Vec<usize> = vec![128, 128], "hidden";
        channels: Vec<usize> = vec![32, 16], "channels";
        batchnorm: bool = true, "batchnorm";
        output: OutputAct = OutputAct::Auto, "output";
    }
);

section!(
    /// Transition generator and its objective.
    VcdSection, "vcd" {
        rho: f64 = 0.01, "rho";
        d: usize = 64, "d";
        arch: NetArch = NetArch::Mlp, "arch";
        hidden: Vec<usize> = vec![256], "hidden";
        channels: Vec<usize> = vec![8, 16], "channels";
        entropy_term: bool = true, "entropy_term";
        recon: ReconNorm = ReconNorm::Sum, "recon";
    }
);

section!(
    DataSection, "data" {
        source: DataSource = DataSource::Ring, "source";
        modes: usize = 8, "modes";
        sigma: f64 = 0.05, "sigma";
        radius: f64 = 1.0, "radius";
        n: usize = 8000, "n";
        /// Seed of the synthetic draw, independent of `train.seed`.
        seed: u64 = 0, "seed";
        images: String = "data/mnist5k/images-idx3-ubyte.gz".into(), "images";
        labels: String = "data/mnist5k/labels-idx1-ubyte.gz".into(), "labels";
        /// Training portion of the loaded data.
        range: Span = Span::all(), "range";
    }
);

section!(
    /// Toy evaluation: quadrature box, Monte-Carlo budget, coverage radius.
    EvalSection, "eval" {
        lo: f64 = -3.0, "lo";
        hi: f64 = 3.0, "hi";
        points: usize = 256, "points";
        samples: usize = 10_000, "samples";
        radius: f64 = 0.15, "radius";
    }
);

section!(
    /// Image grids written by `sample` and `chain`.
    SampleSection, "sample" {
        rows: usize = 10, "rows";
        cols: usize = 10, "cols";
        chains: usize = 10, "chains";
        steps: usize = 9, "steps";
    }
);

section!(
    /// Classifier training with optional transition augmentation.
    SemisupSection, "semisup" {
        labeled: Span = Span::of(0..1000), "labeled";
        val: Span = Span::of(3000..4000), "val";
        test: Span = Span::of(4000..5000), "test";
        epochs: usize = 30, "epochs";
        batch: usize = 50, "batch";
        lr: f64 = 1.0, "lr";
        dropout: f64 = 0.5, "dropout";
        noise: f64 = 0.1, "noise";
        channels: Vec<usize> = vec![8, 16], "channels";
        fc: usize = 64, "fc";
        /// Weights of the clean and augmented cross-entropy terms.
        weights: Vec<f64> = vec![0.5, 0.5], "weights";
        /// Transition generator checkpoint; empty trains without augmentation.
        generator: String = String::new(), "generator";
    }
);

/// Complete configuration of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub train: TrainSection,
    pub model: ModelSection,
    pub energy: EnergySection,
    pub gen: GenSection,
    pub vcd: VcdSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub sample: SampleSection,
    pub semisup: SemisupSection,
}

impl FromStr for Config {
    type Err = Error;
    fn from_str(text: &str) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let cfg = Config {
            train: TrainSection::read(&mut e)?,
            model: ModelSection::read(&mut e)?,
            energy: EnergySection::read(&mut e)?,
            gen: GenSection::read(&mut e)?,
            vcd: VcdSection::read(&mut e)?,
            data: DataSection::read(&mut e)?,
            eval: EvalSection::read(&mut e)?,
            sample: SampleSection::read(&mut e)?,
            semisup: SemisupSection::read(&mut e)?,
        };
        e.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        fs::read_to_string(path)?.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let t = &self.train;
        if t.k == 0 {
            return bad("train.k must be >= 1".into());
        }
        if t.batch == 0 {
            return bad("train.batch must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.vcd.rho) {
            return bad(format!("vcd.rho = {} outside [0, 1]", self.vcd.rho));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.decay) || !(t.eps > 0.0) {
            return bad("optimizer settings need lr >= 0, decay in [0, 1), eps > 0".into());
        }
        if self.model.experts == 0 || self.gen.dz == 0 || self.vcd.d == 0 {
            return bad("model.K, gen.dz and vcd.d must be >= 1".into());
        }
        if self.energy.arch == NetArch::Mlp && self.energy.hidden.is_empty() {
            return bad("energy.hidden needs at least one width".into());
        }
        if !(self.eval.lo < self.eval.hi) || self.eval.points < 16 {
            return bad("eval grid needs lo < hi and at least 16 points".into());
        }
        if self.semisup.weights.len() != 2 {
            return bad("semisup.weights takes two values".into());
        }
        if !(0.0..1.0).contains(&self.semisup.dropout) {
            return bad("semisup.dropout must be in [0, 1)".into());
        }
        Ok(())
    }

    /// Every key with its resolved value, in section order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.train.write(&mut out);
        self.model.write(&mut out);
        self.energy.write(&mut out);
        self.gen.write(&mut out);
        self.vcd.write(&mut out);
        self.data.write(&mut out);
        self.eval.write(&mut out);
        self.sample.write(&mut out);
        self.semisup.write(&mut out);
        out
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let kind = match self.data.source {
            DataSource::Ring => SynthKind::Ring,
            DataSource::Grid => SynthKind::Grid,
            DataSource::Idx => return Err(Error::Config("data.source = idx is not a synthetic mixture".into())),
        };
        Ok(SynthSpec {
            kind,
            modes: self.data.modes,
            sigma: self.data.sigma,
            n: self.data.n,
            radius: self.data.radius,
        })
    }

    /// The full dataset named by the `data.*` keys, before `data.range`.
    pub fn load_full_dataset(&self) -> Result<Dataset> {
        match self.data.source {
            DataSource::Idx => {
                let labels = (!self.data.labels.is_empty()).then(|| Path::new(&self.data.labels));
                load_idx(Path::new(&self.data.images), labels)
            }
            _ => synth(&self.synth_spec()?, &mut ChaCha8Rng::seed_from_u64(self.data.seed)),
        }
    }

    /// Training data: the loaded dataset restricted to `data.range`.
    pub fn load_dataset(&self) -> Result<Dataset> {
        self.data.range.apply(&self.load_full_dataset()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_snapshot() {
        let cfg = Config::default();
        let back: Config = cfg.to_text().parse().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parses_values_and_comments() {
        let cfg: Config = "# toy run\ntrain.loop = vcd\ntrain.k = 3 # inner steps\nmodel.K = 7\nvcd.rho=0.5\ndata.range = 10..20\nenergy.hidden = 4, 5\n"
            .parse()
            .unwrap();
        assert_eq!(cfg.train.kind, LoopKind::Vcd);
        assert_eq!(cfg.train.k, 3);
        assert_eq!(cfg.model.experts, 7);
        assert_eq!(cfg.vcd.rho, 0.5);
        assert_eq!(cfg.data.range, Span::of(10..20));
        assert_eq!(cfg.energy.hidden, vec![4, 5]);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = "train.kk = 2".parse::<Config>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("train.kk"));
    }

    #[test]
    fn unknown_loop_kind_is_an_error() {
        assert!(matches!("train.loop = wgan".parse::<Config>(), Err(Error::Config(_))));
    }

    #[test]
    fn invariants_are_checked() {
        for bad in ["train.k = 0", "train.batch = 0", "vcd.rho = 1.5", "vcd.rho = -0.1", "eval.points = 8"] {
            assert!(matches!(bad.parse::<Config>(), Err(Error::Config(_))), "{bad}");
        }
        assert!("train.k = 1\ntrain.k = 2".parse::<Config>().is_err());
    }

    #[test]
    fn float_snapshot_is_exact() {
        let mut cfg = Config::default();
        cfg.vcd.rho = 0.1 + 0.2;
        let back: Config = cfg.to_text().parse().unwrap();
        assert_eq!(back.vcd.rho.to_bits(), cfg.vcd.rho.to_bits());
    }
}
