//! Experiment configuration: a flat, line-oriented `key = value` format
//! with `[section]` headers.
//!
//! Grammar (also documented in the README):
//!   - Lines are trimmed; empty lines and lines starting with `#` or `;`
//!     are ignored. Inline comments are not supported.
//!   - `[section]` starts a section; subsequent keys are addressed as
//!     `section.key`.
//!   - `key = value` binds one key; the value is everything after the
//!     first `=`, trimmed. Lists are comma-separated.
//!   - Keys may not repeat. Unknown keys are rejected by name, so a
//!     typo can never be silently ignored.
//!   - Units are explicit in key names: `*_mb` values are megabytes
//!     (10^6 bytes), `*_gflops` values are GFLOPs (10^9 FLOPs).

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use flift_core::cost::TrainingShape;
use flift_core::fedsim::StrategyConfig;
use flift_core::nn::OptimizerSpec;
use flift_core::{
    ArchitectureDescriptor, ConstraintScenario, DeviceConstraint, Error, Result,
};

/// Parsed but untyped key/value pairs, in file order.
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

pub fn parse_raw(text: &str) -> Result<RawConfig> {
    let mut values = BTreeMap::new();
    let mut section = String::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(Error::config(format!(
                    "line {lineno}: unterminated section header `{line}`"
                )));
            };
            let name = name.trim();
            if name.is_empty() || !name.chars().all(valid_key_char) {
                return Err(Error::config(format!(
                    "line {lineno}: invalid section name `{name}`"
                )));
            }
            section = name.to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {lineno}: expected `key = value`, got `{line}`"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || !key.chars().all(valid_key_char) {
            return Err(Error::config(format!("line {lineno}: invalid key `{key}`")));
        }
        if value.is_empty() {
            return Err(Error::config(format!("line {lineno}: empty value for key `{key}`")));
        }
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        if values.insert(full.clone(), value.to_string()).is_some() {
            return Err(Error::config(format!("duplicate key `{full}` (line {lineno})")));
        }
    }
    Ok(RawConfig { values })
}

fn valid_key_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

/// Typed accessor over a [`RawConfig`] that tracks which keys the schema
/// consumed, so leftovers can be reported by name.
struct Binder {
    values: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl Binder {
    fn new(raw: RawConfig) -> Self {
        Binder {
            values: raw.values,
            used: BTreeSet::new(),
        }
    }

    fn get(&mut self, key: &str) -> Option<&str> {
        if self.values.contains_key(key) {
            self.used.insert(key.to_string());
            self.values.get(key).map(String::as_str)
        } else {
            None
        }
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::config(format!("key `{key}`: `{v}` is not {what}"))
            }),
        }
    }

    fn get_string(&mut self, key: &str) -> Option<String> {
        self.get(key).map(str::to_string)
    }

    fn get_u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.parse(key, "an unsigned integer")
    }

    fn get_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.parse(key, "an unsigned integer")
    }

    fn get_f64(&mut self, key: &str) -> Result<Option<f64>> {
        let v: Option<f64> = self.parse(key, "a number")?;
        if let Some(x) = v {
            if !x.is_finite() {
                return Err(Error::config(format!("key `{key}`: value must be finite")));
            }
        }
        Ok(v)
    }

    fn get_list<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Result<Option<Vec<T>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => {
                let items: std::result::Result<Vec<T>, _> =
                    v.split(',').map(|s| s.trim().parse::<T>()).collect();
                items.map(Some).map_err(|_| {
                    Error::config(format!(
                        "key `{key}`: `{v}` is not a comma-separated list of {what}"
                    ))
                })
            }
        }
    }

    /// Megabytes (10^6 bytes) to bytes.
    fn get_mb(&mut self, key: &str) -> Result<Option<u64>> {
        match self.get_f64(key)? {
            None => Ok(None),
            Some(v) if v >= 0.0 => Ok(Some((v * 1e6).round() as u64)),
            Some(_) => Err(Error::config(format!("key `{key}`: must be >= 0"))),
        }
    }

    /// GFLOPs (10^9 FLOPs) to FLOPs.
    fn get_gflops(&mut self, key: &str) -> Result<Option<u64>> {
        match self.get_f64(key)? {
            None => Ok(None),
            Some(v) if v >= 0.0 => Ok(Some((v * 1e9).round() as u64)),
            Some(_) => Err(Error::config(format!("key `{key}`: must be >= 0"))),
        }
    }

    fn reject_unused(self) -> Result<()> {
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !self.used.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let list = unknown
                .iter()
                .map(|k| format!("`{k}`"))
                .collect::<Vec<_>>()
                .join(", ");
            Err(Error::config(format!("unknown key(s): {list}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    NextToken,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionKind {
    Equal,
    Dirichlet,
    Correlated,
}

#[derive(Clone, Debug)]
pub struct DataSection {
    pub task: TaskKind,
    pub corpus: Option<PathBuf>,
    pub eval_fraction: f64,
    pub partition: PartitionKind,
    pub alpha: f64,
    pub num_classes: Option<usize>,
    pub examples_per_class: Option<usize>,
    pub data_seed: u64,
    /// Constraint-group index treated as the weak group by the
    /// correlated partition and the weighted-F1 metric.
    pub weak_group: usize,
}

#[derive(Clone, Debug)]
pub struct PretrainSection {
    pub corpus: Option<PathBuf>,
    pub steps: usize,
    pub batch: usize,
    pub context: Option<usize>,
    pub lr: f64,
    pub lr_end: f64,
    pub log_every: usize,
}

#[derive(Clone, Debug)]
pub struct FederationSection {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub eval_every: usize,
}

#[derive(Clone, Debug)]
pub struct CostGrid {
    pub layerft_t: Option<Vec<usize>>,
    pub lora_rank: Vec<usize>,
    pub subset_scale: Vec<f64>,
    pub lowrank_rank: Vec<usize>,
    pub exit_layer: Option<Vec<usize>>,
}

/// Fully bound experiment configuration. Sections a given subcommand
/// does not need may be absent; the accessors below report which
/// section is missing when a command requires it.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub archs: Vec<ArchitectureDescriptor>,
    pub scenario: Option<ConstraintScenario>,
    pub strategy: Option<StrategyConfig>,
    pub federation: Option<FederationSection>,
    pub shape: Option<TrainingShape>,
    pub lr: Option<f64>,
    pub optimizer: OptimizerSpec,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub checkpoint_dir: Option<PathBuf>,
    pub cost: CostGrid,
}

impl ExperimentConfig {
    pub fn require_archs(&self) -> Result<&[ArchitectureDescriptor]> {
        if self.archs.is_empty() {
            return Err(Error::config(
                "missing [model] section (family, layers, ...)",
            ));
        }
        Ok(&self.archs)
    }

    pub fn require_scenario(&self) -> Result<&ConstraintScenario> {
        self.scenario.as_ref().ok_or_else(|| {
            Error::config("missing [constraints] section (total_devices, groups, ...)")
        })
    }

    pub fn require_strategy(&self) -> Result<&StrategyConfig> {
        self.strategy
            .as_ref()
            .ok_or_else(|| Error::config("missing [strategy] section (kind, ...)"))
    }

    pub fn require_shape(&self) -> Result<TrainingShape> {
        self.shape.ok_or_else(|| {
            Error::config("missing [shape] section (batch, context, steps_per_round)")
        })
    }

    pub fn require_federation(&self) -> Result<&FederationSection> {
        self.federation.as_ref().ok_or_else(|| {
            Error::config("missing [federation] section (rounds, clients_per_round, ...)")
        })
    }

    pub fn require_lr(&self) -> Result<f64> {
        self.lr
            .ok_or_else(|| Error::config("missing key `optimizer.lr`"))
    }

    /// Directory federated runs load checkpoints from.
    pub fn checkpoints(&self) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| self.out.clone())
    }
}

pub fn load(text: &str) -> Result<ExperimentConfig> {
    let mut b = Binder::new(parse_raw(text)?);

    let name = b.get_string("name").unwrap_or_else(|| "experiment".into());
    if !name
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(Error::config(format!(
            "key `name`: `{name}` may only contain letters, digits, `_`, `-`"
        )));
    }
    let seed = b.get_u64("seed")?;
    let seed_list = b.get_list::<u64>("seeds", "unsigned integers")?;
    let seeds = match (seed, seed_list) {
        (Some(_), Some(_)) => {
            return Err(Error::config("keys `seed` and `seeds` are mutually exclusive"))
        }
        (Some(s), None) => vec![s],
        (None, Some(list)) if !list.is_empty() => list,
        (None, Some(_)) => return Err(Error::config("key `seeds`: list is empty")),
        (None, None) => vec![0],
    };
    let out = PathBuf::from(b.get_string("out").unwrap_or_else(|| "out".into()));

    let archs = bind_model(&mut b)?;
    let scenario = bind_constraints(&mut b)?;
    let strategy = bind_strategy(&mut b)?;
    let federation = bind_federation(&mut b)?;
    let shape = bind_shape(&mut b)?;
    let (lr, optimizer) = bind_optimizer(&mut b)?;
    let data = bind_data(&mut b)?;
    let pretrain = bind_pretrain(&mut b)?;
    let checkpoint_dir = b.get_string("run.checkpoint_dir").map(PathBuf::from);
    let cost = bind_cost(&mut b)?;

    b.reject_unused()?;

    if let (Some(StrategyConfig::DepthFl { exit_layer }), Some(archs_max)) =
        (&strategy, archs.iter().map(|a| a.layers).max())
    {
        if *exit_layer < 1 || *exit_layer >= archs_max {
            return Err(Error::config(format!(
                "key `strategy.exit_layer`: {exit_layer} must lie in [1, {})",
                archs_max
            )));
        }
    }

    Ok(ExperimentConfig {
        name,
        seeds,
        out,
        archs,
        scenario,
        strategy,
        federation,
        shape,
        lr,
        optimizer,
        data,
        pretrain,
        checkpoint_dir,
        cost,
    })
}

fn bind_model(b: &mut Binder) -> Result<Vec<ArchitectureDescriptor>> {
    let family = b.get_string("model.family");
    let layers = b.get_list::<usize>("model.layers", "layer counts")?;
    let embed_dim = b.get_usize("model.embed_dim")?;
    let heads = b.get_usize("model.heads")?;
    let ffn_mult = b.get_usize("model.ffn_mult")?;
    let vocab = b.get_usize("model.vocab")?;
    let context = b.get_usize("model.context")?;

    let Some(layers) = layers else {
        if family.is_some()
            || embed_dim.is_some()
            || heads.is_some()
            || ffn_mult.is_some()
            || vocab.is_some()
            || context.is_some()
        {
            return Err(Error::config("key `model.layers` is required with [model]"));
        }
        return Ok(Vec::new());
    };
    if layers.is_empty() {
        return Err(Error::config("key `model.layers`: list is empty"));
    }
    let base = match family.as_deref() {
        None | Some("desk") => ArchitectureDescriptor::desk(1),
        Some("tiny") => ArchitectureDescriptor::tiny(1),
        Some(other) => {
            return Err(Error::config(format!(
                "key `model.family`: `{other}` is not one of desk, tiny"
            )))
        }
    };
    let mut archs = Vec::with_capacity(layers.len());
    let mut seen = BTreeSet::new();
    for l in layers {
        if !seen.insert(l) {
            return Err(Error::config(format!(
                "key `model.layers`: layer count {l} repeats"
            )));
        }
        let mut a = base.sibling(l);
        if let Some(v) = embed_dim {
            a.embed_dim = v;
        }
        if let Some(v) = heads {
            a.heads = v;
        }
        if let Some(v) = ffn_mult {
            a.ffn_mult = v;
        }
        if let Some(v) = vocab {
            a.vocab = v;
        }
        if let Some(v) = context {
            a.context = v;
        }
        a.validate()?;
        archs.push(a);
    }
    Ok(archs)
}

fn bind_constraints(b: &mut Binder) -> Result<Option<ConstraintScenario>> {
    let total = b.get_usize("constraints.total_devices")?;
    let group_count = b.get_usize("constraints.groups")?;
    let (Some(total), Some(group_count)) = (total, group_count) else {
        if total.is_some() || group_count.is_some() {
            return Err(Error::config(
                "[constraints] needs both `total_devices` and `groups`",
            ));
        }
        return Ok(None);
    };
    if group_count == 0 {
        return Err(Error::config("key `constraints.groups`: must be >= 1"));
    }
    let mut groups = Vec::with_capacity(group_count);
    for g in 0..group_count {
        let fraction = b
            .get_f64(&format!("constraints.group{g}.fraction"))?
            .ok_or_else(|| {
                Error::config(format!("missing key `constraints.group{g}.fraction`"))
            })?;
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::config(format!(
                "key `constraints.group{g}.fraction`: must lie in [0, 1]"
            )));
        }
        let mut constraint = DeviceConstraint::UNBOUNDED;
        if let Some(bytes) = b.get_mb(&format!("constraints.group{g}.memory_mb"))? {
            constraint.memory_bytes = flift_core::arch::Limit::At(bytes);
        }
        if let Some(bytes) = b.get_mb(&format!("constraints.group{g}.upload_mb"))? {
            constraint.upload_bytes = flift_core::arch::Limit::At(bytes);
        }
        if let Some(flops) = b.get_gflops(&format!("constraints.group{g}.gflops"))? {
            constraint.flops = flift_core::arch::Limit::At(flops);
        }
        groups.push((fraction, constraint));
    }
    Ok(Some(ConstraintScenario {
        total_devices: total,
        groups,
    }))
}

fn bind_strategy(b: &mut Binder) -> Result<Option<StrategyConfig>> {
    let kind = b.get_string("strategy.kind");
    let max_rank = b.get_usize("strategy.max_rank")?;
    let levels = b.get_list::<f64>("strategy.levels", "numbers")?;
    let exit_layer = b.get_usize("strategy.exit_layer")?;

    let Some(kind) = kind else {
        if max_rank.is_some() || levels.is_some() || exit_layer.is_some() {
            return Err(Error::config("key `strategy.kind` is required with [strategy]"));
        }
        return Ok(None);
    };

    let reject = |key: &str, present: bool| -> Result<()> {
        if present {
            Err(Error::config(format!(
                "key `strategy.{key}` is not used by strategy `{kind}`"
            )))
        } else {
            Ok(())
        }
    };
    let need_rank = || {
        max_rank.ok_or_else(|| {
            Error::config(format!("key `strategy.max_rank` is required by `{kind}`"))
        })
    };
    let need_levels = |levels: &Option<Vec<f64>>| {
        levels.clone().ok_or_else(|| {
            Error::config(format!("key `strategy.levels` is required by `{kind}`"))
        })
    };

    let strategy = match kind.as_str() {
        "layerft" => {
            reject("max_rank", max_rank.is_some())?;
            reject("levels", levels.is_some())?;
            reject("exit_layer", exit_layer.is_some())?;
            StrategyConfig::LayerFt
        }
        "hetlora" | "fedhm" => {
            reject("levels", levels.is_some())?;
            reject("exit_layer", exit_layer.is_some())?;
            let max_rank = need_rank()?;
            if kind == "hetlora" {
                StrategyConfig::HetLora { max_rank }
            } else {
                StrategyConfig::FedHm { max_rank }
            }
        }
        "heterofl" | "fjord" | "fedrolex" => {
            reject("max_rank", max_rank.is_some())?;
            reject("exit_layer", exit_layer.is_some())?;
            let levels = need_levels(&levels)?;
            if levels.iter().any(|&s| !(0.0..=1.0).contains(&s) || s == 0.0) {
                return Err(Error::config(
                    "key `strategy.levels`: every level must lie in (0, 1]",
                ));
            }
            match kind.as_str() {
                "heterofl" => StrategyConfig::HeteroFl { levels },
                "fjord" => StrategyConfig::Fjord { levels },
                _ => StrategyConfig::FedRolex { levels },
            }
        }
        "depthfl" => {
            reject("max_rank", max_rank.is_some())?;
            reject("levels", levels.is_some())?;
            let exit_layer = exit_layer.ok_or_else(|| {
                Error::config("key `strategy.exit_layer` is required by `depthfl`")
            })?;
            StrategyConfig::DepthFl { exit_layer }
        }
        other => {
            return Err(Error::config(format!(
                "key `strategy.kind`: `{other}` is not one of layerft, hetlora, heterofl, fjord, fedrolex, fedhm, depthfl"
            )))
        }
    };
    Ok(Some(strategy))
}

fn bind_federation(b: &mut Binder) -> Result<Option<FederationSection>> {
    let rounds = b.get_usize("federation.rounds")?;
    let clients = b.get_usize("federation.clients_per_round")?;
    let eval_every = b.get_usize("federation.eval_every")?;
    let (Some(rounds), Some(clients_per_round)) = (rounds, clients) else {
        if rounds.is_some() || clients.is_some() || eval_every.is_some() {
            return Err(Error::config(
                "[federation] needs both `rounds` and `clients_per_round`",
            ));
        }
        return Ok(None);
    };
    Ok(Some(FederationSection {
        rounds,
        clients_per_round,
        eval_every: eval_every.unwrap_or(5),
    }))
}

fn bind_shape(b: &mut Binder) -> Result<Option<TrainingShape>> {
    let batch = b.get_usize("shape.batch")?;
    let context = b.get_usize("shape.context")?;
    let steps = b.get_usize("shape.steps_per_round")?;
    match (batch, context, steps) {
        (None, None, None) => Ok(None),
        (Some(batch), Some(context), Some(steps)) => {
            Ok(Some(TrainingShape::new(batch, context, steps)?))
        }
        _ => Err(Error::config(
            "[shape] needs all of `batch`, `context`, `steps_per_round`",
        )),
    }
}

fn bind_optimizer(b: &mut Binder) -> Result<(Option<f64>, OptimizerSpec)> {
    let lr = b.get_f64("optimizer.lr")?;
    if let Some(lr) = lr {
        if lr < 0.0 {
            return Err(Error::config("key `optimizer.lr`: must be >= 0"));
        }
    }
    let mut spec = OptimizerSpec::default();
    if let Some(v) = b.get_f64("optimizer.beta1")? {
        spec.beta1 = v;
    }
    if let Some(v) = b.get_f64("optimizer.beta2")? {
        spec.beta2 = v;
    }
    if let Some(v) = b.get_f64("optimizer.eps")? {
        spec.eps = v;
    }
    if let Some(v) = b.get_f64("optimizer.weight_decay")? {
        spec.weight_decay = v;
    }
    Ok((lr, spec))
}

fn bind_data(b: &mut Binder) -> Result<DataSection> {
    let task = match b.get_string("data.task").as_deref() {
        None | Some("next_token") => TaskKind::NextToken,
        Some("classification") => TaskKind::Classification,
        Some(other) => {
            return Err(Error::config(format!(
                "key `data.task`: `{other}` is not one of next_token, classification"
            )))
        }
    };
    let partition = match b.get_string("data.partition").as_deref() {
        None => match task {
            TaskKind::NextToken => PartitionKind::Equal,
            TaskKind::Classification => PartitionKind::Dirichlet,
        },
        Some("equal") => PartitionKind::Equal,
        Some("dirichlet") => PartitionKind::Dirichlet,
        Some("correlated") => PartitionKind::Correlated,
        Some(other) => {
            return Err(Error::config(format!(
                "key `data.partition`: `{other}` is not one of equal, dirichlet, correlated"
            )))
        }
    };
    match (task, partition) {
        (TaskKind::NextToken, PartitionKind::Equal) => {}
        (TaskKind::NextToken, _) => {
            return Err(Error::config(
                "key `data.partition`: next_token supports only `equal`",
            ))
        }
        (TaskKind::Classification, PartitionKind::Equal) => {
            return Err(Error::config(
                "key `data.partition`: classification needs `dirichlet` or `correlated`",
            ))
        }
        (TaskKind::Classification, _) => {}
    }
    let eval_fraction = b.get_f64("data.eval_fraction")?.unwrap_or(0.1);
    if !(0.0 < eval_fraction && eval_fraction < 1.0) {
        return Err(Error::config(
            "key `data.eval_fraction`: must lie strictly between 0 and 1",
        ));
    }
    let alpha = b.get_f64("data.alpha")?.unwrap_or(0.1);
    if alpha <= 0.0 {
        return Err(Error::config("key `data.alpha`: must be > 0"));
    }
    Ok(DataSection {
        task,
        corpus: b.get_string("data.corpus").map(PathBuf::from),
        eval_fraction,
        partition,
        alpha,
        num_classes: b.get_usize("data.num_classes")?,
        examples_per_class: b.get_usize("data.examples_per_class")?,
        data_seed: b.get_u64("data.data_seed")?.unwrap_or(1),
        weak_group: b.get_usize("data.weak_group")?.unwrap_or(1),
    })
}

fn bind_pretrain(b: &mut Binder) -> Result<PretrainSection> {
    let lr = b.get_f64("pretrain.lr")?.unwrap_or(3e-4);
    if lr < 0.0 {
        return Err(Error::config("key `pretrain.lr`: must be >= 0"));
    }
    let lr_end = b.get_f64("pretrain.lr_end")?.unwrap_or(lr / 10.0);
    Ok(PretrainSection {
        corpus: b.get_string("pretrain.corpus").map(PathBuf::from),
        steps: b.get_usize("pretrain.steps")?.unwrap_or(20_000),
        batch: b.get_usize("pretrain.batch")?.unwrap_or(32),
        context: b.get_usize("pretrain.context")?,
        lr,
        lr_end,
        log_every: b.get_usize("pretrain.log_every")?.unwrap_or(1000).max(1),
    })
}

fn bind_cost(b: &mut Binder) -> Result<CostGrid> {
    Ok(CostGrid {
        layerft_t: b.get_list::<usize>("cost.layerft_t", "layer counts")?,
        lora_rank: b
            .get_list::<usize>("cost.lora_rank", "ranks")?
            .unwrap_or_else(|| vec![2, 4]),
        subset_scale: b
            .get_list::<f64>("cost.subset_scale", "scales")?
            .unwrap_or_else(|| vec![0.5, 1.0]),
        lowrank_rank: b
            .get_list::<usize>("cost.lowrank_rank", "ranks")?
            .unwrap_or_else(|| vec![2, 4]),
        exit_layer: b.get_list::<usize>("cost.exit_layer", "layer indices")?,
    })
}
