use serde::{Deserialize, Serialize};

use crate::attention::GateWiring;
use crate::error::{Error, Result};
use crate::geometry::Scheme;
use crate::posenc::{FKind, PosEncConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Parallel,
    Serial,
}

/// Position encoding of one branch: absent, or one of the offset schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeChoice {
    None,
    BoxSurface,
    Center,
    Vertex,
}

impl PeChoice {
    pub fn scheme(self) -> Option<Scheme> {
        match self {
            PeChoice::None => None,
            PeChoice::BoxSurface => Some(Scheme::BoxSurface),
            PeChoice::Center => Some(Scheme::Center),
            PeChoice::Vertex => Some(Scheme::Vertex),
        }
    }
}

impl std::str::FromStr for PeChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(PeChoice::None);
        }
        Ok(match s.parse::<Scheme>()? {
            Scheme::BoxSurface => PeChoice::BoxSurface,
            Scheme::Center => PeChoice::Center,
            Scheme::Vertex => PeChoice::Vertex,
        })
    }
}

/// Everything that shapes a model and its training run.
///
/// For the serial decoder the single branch uses the `target_*` settings and
/// its gate (if any) is computed from all non-Other tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub queries: usize,
    pub seeds: usize,
    pub layers: usize,
    pub decoder: DecoderKind,
    pub target_pe: PeChoice,
    pub target_gate: bool,
    pub surround_pe: PeChoice,
    pub surround_gate: bool,
    pub wiring: GateWiring,
    pub f_kind: FKind,
    pub f_scale: f64,
    pub pe_hidden: usize,
    pub pos_dim: usize,
    pub sem_dim: usize,
    pub tau: f64,
    pub sem_weight: f64,
    pub lr: f64,
    /// Cosine decay ends at `lr · lr_floor`; 1 keeps the rate constant.
    pub lr_floor: f64,
    pub steps: usize,
    pub batch: usize,
    pub clip: f64,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            queries: 16,
            seeds: 128,
            layers: 3,
            decoder: DecoderKind::Parallel,
            target_pe: PeChoice::BoxSurface,
            target_gate: false,
            surround_pe: PeChoice::BoxSurface,
            surround_gate: true,
            wiring: GateWiring::GateOnAll,
            f_kind: FKind::SignedLog,
            f_scale: 0.1,
            pe_hidden: 16,
            pos_dim: 64,
            sem_dim: 64,
            tau: 0.07,
            sem_weight: 1.0,
            lr: 2e-3,
            lr_floor: 0.1,
            steps: 2000,
            batch: 8,
            clip: 5.0,
            seed: 0,
            log_every: 1,
            checkpoint_every: 500,
        }
    }
}

pub const CONFIG_KEYS: [&str; 26] = [
    "dim",
    "heads",
    "queries",
    "seeds",
    "layers",
    "decoder",
    "target_pe",
    "target_gate",
    "surround_pe",
    "surround_gate",
    "wiring",
    "f_kind",
    "f_scale",
    "pe_hidden",
    "pos_dim",
    "sem_dim",
    "tau",
    "sem_weight",
    "lr",
    "lr_floor",
    "steps",
    "batch",
    "clip",
    "seed",
    "log_every",
    "checkpoint_every",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_decoder(v: &str) -> Result<DecoderKind> {
    match v {
        "parallel" => Ok(DecoderKind::Parallel),
        "serial" => Ok(DecoderKind::Serial),
        _ => Err(Error::Config(format!("bad value `{v}` for `decoder` (parallel|serial)"))),
    }
}

impl ModelConfig {
    /// The ablation variant with both branches on plain position encoding.
    pub fn no_gate() -> Self {
        Self { surround_gate: false, ..Self::default() }
    }

    pub fn serial() -> Self {
        Self { decoder: DecoderKind::Serial, surround_gate: false, ..Self::default() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dim" => self.dim = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "queries" => self.queries = parse(key, v)?,
            "seeds" => self.seeds = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "decoder" => self.decoder = parse_decoder(v)?,
            "target_pe" => self.target_pe = v.parse()?,
            "target_gate" => self.target_gate = parse(key, v)?,
            "surround_pe" => self.surround_pe = v.parse()?,
            "surround_gate" => self.surround_gate = parse(key, v)?,
            "wiring" => self.wiring = v.parse()?,
            "f_kind" => self.f_kind = v.parse()?,
            "f_scale" => self.f_scale = parse(key, v)?,
            "pe_hidden" => self.pe_hidden = parse(key, v)?,
            "pos_dim" => self.pos_dim = parse(key, v)?,
            "sem_dim" => self.sem_dim = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "sem_weight" => self.sem_weight = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_floor" => self.lr_floor = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`; valid keys: {}", CONFIG_KEYS.join(", ")))),
        }
        Ok(())
    }

    /// Applies `key=value` strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.queries == 0 || self.queries > self.seeds {
            return bad(format!("need 1 ≤ queries ({}) ≤ seeds ({})", self.queries, self.seeds));
        }
        if self.layers == 0 {
            return bad("need at least one decoder layer".into());
        }
        if self.pe_hidden == 0 || self.pos_dim == 0 || self.sem_dim == 0 || self.batch == 0 {
            return bad("pe_hidden, pos_dim, sem_dim and batch must be positive".into());
        }
        if !(self.tau > 0.0) || !(self.f_scale > 0.0) || !(self.lr >= 0.0) || !(self.clip > 0.0) || !(self.sem_weight >= 0.0) || !(0.0..=1.0).contains(&self.lr_floor) {
            return bad("tau, f_scale and clip must be positive; lr and sem_weight non-negative; lr_floor in [0, 1]".into());
        }
        Ok(())
    }

    pub fn posenc(&self, pe: PeChoice) -> Option<PosEncConfig> {
        pe.scheme().map(|scheme| PosEncConfig { scheme, f_kind: self.f_kind, f_scale: self.f_scale, heads: self.heads, hidden_dim: self.pe_hidden })
    }

    pub fn branch_wiring(&self, gated: bool) -> GateWiring {
        if gated {
            self.wiring
        } else {
            GateWiring::None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_validate() {
        let mut c = ModelConfig::default();
        c.apply_overrides(&["decoder=serial", "surround_pe=vertex", "wiring=gate_on_pe", "lr=0"]).unwrap();
        assert_eq!(c.decoder, DecoderKind::Serial);
        assert_eq!(c.surround_pe, PeChoice::Vertex);
        assert_eq!(c.wiring, GateWiring::GateOnPe);
        assert_eq!(c.lr, 0.0);
        assert!(ModelConfig::default().apply_overrides(&["heads=5"]).is_err());
        assert!(ModelConfig::default().apply_overrides(&["queries=500"]).is_err());
        assert!(ModelConfig::default().apply_overrides(&["nope"]).is_err());
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = ModelConfig::default().set("depth", "3").unwrap_err().to_string();
        for k in CONFIG_KEYS {
            assert!(err.contains(k), "{err}");
        }
    }

    #[test]
    fn every_listed_key_is_settable() {
        let c = ModelConfig::default();
        let json = serde_json::to_value(&c).unwrap();
        for k in CONFIG_KEYS {
            let v = match &json[k] {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            ModelConfig::default().set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(json.as_object().unwrap().len(), CONFIG_KEYS.len());
    }
}
