//! File formats: plain-text attention maps, JSON experiment configs,
//! trajectory CSV and 8-bit PGM heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attn::{AttentionMap, AttentionStack, TokenSpec};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Metrics};
use crate::metrics::MoranConfig;
use crate::regions::RegionRules;
use crate::sim::{BlobSpec, Bump, SimConfig, StepSize, TokenBlobs, Trajectory};

pub const MAP_MAGIC: &str = "AMAP";
pub const MAP_VERSION: u32 = 1;

/// Writes a stack as
///
/// ```text
/// AMAP 1 H W T
/// id_1 id_2 ... id_T
/// <T blocks of H lines, W values each>
/// ```
///
/// Values use 17 significant digits, so parsing restores them bit for bit.
pub fn write_map_file(stack: &AttentionStack) -> String {
    let (h, w) = (stack.height(), stack.width());
    let mut out = format!("{MAP_MAGIC} {MAP_VERSION} {h} {w} {}\n", stack.len());
    out.push_str(&stack.token_ids().join(" "));
    out.push('\n');
    for map in stack.maps() {
        for row in map.values().chunks(w) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses the format written by [`write_map_file`]. Blank lines are ignored.
pub fn parse_map_file(text: &str) -> Result<AttentionStack> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (ln, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != MAP_MAGIC {
        return Err(parse_err(
            ln,
            format!("expected header \"{MAP_MAGIC} {MAP_VERSION} H W T\", got {header:?}"),
        ));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| parse_err(ln, format!("{what} {s:?} is not a non-negative integer")))
    };
    if num(fields[1], "version")? != MAP_VERSION as usize {
        return Err(parse_err(ln, format!("unsupported version {}", fields[1])));
    }
    let (h, w, t) = (
        num(fields[2], "height")?,
        num(fields[3], "width")?,
        num(fields[4], "token count")?,
    );
    if h == 0 || w == 0 || t == 0 {
        return Err(parse_err(ln, "dimensions must be positive"));
    }

    let (ln, id_line) = lines
        .next()
        .ok_or_else(|| parse_err(ln + 1, "missing token id line"))?;
    let ids: Vec<String> = id_line.split_whitespace().map(str::to_string).collect();
    if ids.len() != t {
        return Err(parse_err(
            ln,
            format!("header declares {t} tokens, id line has {}", ids.len()),
        ));
    }

    let mut maps = Vec::with_capacity(t);
    for (block, id) in ids.iter().enumerate() {
        let mut values = Vec::with_capacity(h * w);
        for row in 0..h {
            let (ln, line) = lines.next().ok_or_else(|| {
                parse_err(
                    text.lines().count() + 1,
                    format!(
                        "missing block {} of {t} (token {id:?}): file ends after {row} of {h} rows",
                        block + 1
                    ),
                )
            })?;
            let mut count = 0;
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| parse_err(ln, format!("{tok:?} is not a number")))?;
                if !v.is_finite() || v < 0.0 {
                    return Err(parse_err(
                        ln,
                        format!("value {tok} must be finite and >= 0"),
                    ));
                }
                values.push(v);
                count += 1;
            }
            if count != w {
                return Err(parse_err(
                    ln,
                    format!("expected {w} values in row {row} of token {id:?}, found {count}"),
                ));
            }
        }
        maps.push(AttentionMap::new(id.clone(), h, w, values)?);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(parse_err(ln, "trailing data after the last block"));
    }
    AttentionStack::new(maps)
}

pub fn read_map_file(path: &Path) -> Result<AttentionStack> {
    parse_map_file(&fs::read_to_string(path)?)
}

/// JSON experiment document: simulation settings plus the initial blobs.
/// Every field except `tokens` has a default; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<TokenSpec>,
    pub blobs: BlobSpec,
    pub total_steps: usize,
    pub optimize_steps: usize,
    pub step_size: StepSize,
    pub max_halvings: u32,
    pub weights: LossWeights,
    pub regions: RegionRules,
    pub metrics: Metrics,
    pub init_noise: f64,
    pub latent_blur: f64,
    pub noise: f64,
    pub seed: u64,
    pub overlap_quantile: f64,
    pub moran: MoranConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_parts(&SimConfig::default(), BlobSpec::new())
    }
}

impl ExperimentConfig {
    pub fn from_parts(sim: &SimConfig, blobs: BlobSpec) -> Self {
        Self {
            height: sim.height,
            width: sim.width,
            tokens: sim.tokens.clone(),
            blobs,
            total_steps: sim.total_steps,
            optimize_steps: sim.optimize_steps,
            step_size: sim.step_size.clone(),
            max_halvings: sim.max_halvings,
            weights: sim.weights,
            regions: sim.regions,
            metrics: sim.metrics,
            init_noise: sim.init_noise,
            latent_blur: sim.latent_blur,
            noise: sim.noise,
            seed: sim.seed,
            overlap_quantile: sim.overlap_quantile,
            moran: sim.moran,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            height: self.height,
            width: self.width,
            tokens: self.tokens.clone(),
            total_steps: self.total_steps,
            optimize_steps: self.optimize_steps,
            step_size: self.step_size.clone(),
            max_halvings: self.max_halvings,
            weights: self.weights,
            regions: self.regions,
            metrics: self.metrics,
            init_noise: self.init_noise,
            latent_blur: self.latent_blur,
            noise: self.noise,
            seed: self.seed,
            overlap_quantile: self.overlap_quantile,
            moran: self.moran,
        }
    }

    /// Two scattered subjects (one with an attribute) and a start token that
    /// soaks up attention away from the blobs.
    pub fn demo() -> Self {
        let bump = |r: f64, c: f64, a: f64| Bump {
            center: [r, c],
            amplitude: a,
            stddev: 1.5,
        };
        let mut blobs = BlobSpec::new();
        blobs.insert(
            "cat".into(),
            TokenBlobs {
                offset: 0.0,
                bumps: vec![bump(3.0, 3.0, 5.0), bump(12.0, 4.0, 4.5)],
            },
        );
        blobs.insert(
            "dog".into(),
            TokenBlobs {
                offset: 0.0,
                bumps: vec![bump(5.0, 6.0, 5.0), bump(11.0, 12.0, 4.5)],
            },
        );
        blobs.insert(
            "red".into(),
            TokenBlobs {
                offset: 0.0,
                bumps: vec![bump(3.0, 4.0, 4.0), bump(12.0, 3.0, 4.0)],
            },
        );
        blobs.insert(
            "<sot>".into(),
            TokenBlobs {
                offset: 3.0,
                bumps: vec![],
            },
        );
        let sim = SimConfig {
            tokens: vec![
                TokenSpec::subject("cat"),
                TokenSpec::animal("dog"),
                TokenSpec::attribute("red", "cat"),
                TokenSpec::context("<sot>"),
            ],
            step_size: StepSize::Constant(0.5),
            init_noise: 0.2,
            latent_blur: 1.0,
            ..SimConfig::default()
        };
        Self::from_parts(&sim, blobs)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.sim_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trajectory as CSV with `# key=value` metadata lines ahead of the header.
/// Numbers use Rust's shortest round-trip formatting; an undefined Moran's I
/// (constant map) is an empty field.
pub fn trajectory_csv(traj: &Trajectory, cfg: &SimConfig) -> String {
    let subjects: Vec<&str> = cfg
        .tokens
        .iter()
        .filter(|t| t.is_subject())
        .map(|t| t.id.as_str())
        .collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# metric_aggregation={}",
        cfg.metrics.aggregation.short()
    );
    let _ = writeln!(out, "# metric_isolation={}", cfg.metrics.isolation.short());
    let _ = writeln!(out, "# seed={}", cfg.seed);
    let _ = writeln!(
        out,
        "# total_steps={} optimize_steps={}",
        cfg.total_steps, cfg.optimize_steps
    );
    let _ = writeln!(
        out,
        "# weights={},{},{},{}",
        cfg.weights.agg_sub, cfg.weights.iso, cfg.weights.max, cfg.weights.agg_attr
    );
    let mut header = vec![
        "step",
        "total",
        "agg_sub",
        "iso",
        "max",
        "agg_attr",
        "grad_norm",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    header.extend(subjects.iter().map(|s| format!("morans_i_{s}")));
    header.push("d_over_dmax".into());
    header.push("overlap_ratio".into());
    out.push_str(&header.join(","));
    out.push('\n');
    for rec in &traj.records {
        let s = &rec.state;
        let mut row = vec![
            rec.step.to_string(),
            s.loss.total.to_string(),
            s.loss.agg_sub.to_string(),
            s.loss.iso.to_string(),
            s.loss.max.to_string(),
            s.loss.agg_attr.to_string(),
            rec.grad_norm.to_string(),
        ];
        row.extend(
            subjects
                .iter()
                .map(|id| fmt_opt(s.morans_i.get(*id).copied().flatten())),
        );
        row.push(s.d_over_dmax.to_string());
        row.push(s.overlap_ratio.to_string());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Binary PGM (P5), values min-max scaled to 0..=255 per map. A constant map
/// is written as all zeros.
pub fn pgm_bytes(map: &AttentionMap) -> Vec<u8> {
    let vals = map.values();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(vals.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Keeps ASCII alphanumerics, `-` and `_`; everything else becomes `_`.
pub fn file_stem(token: &str) -> String {
    token
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `trajectory.csv` and one heatmap per token per step under `dir`
/// (`heatmaps/step_SSS_tokK_<id>.pgm`, plus `final_tokK_<id>.pgm`).
pub fn write_trajectory(dir: &Path, traj: &Trajectory, cfg: &SimConfig) -> Result<()> {
    fs::create_dir_all(dir.join("heatmaps"))?;
    fs::write(dir.join("trajectory.csv"), trajectory_csv(traj, cfg))?;
    for (step, stack) in traj.stacks.iter().enumerate() {
        for (k, map) in stack.maps().iter().enumerate() {
            let name = format!("step_{step:03}_tok{k}_{}.pgm", file_stem(&map.token));
            fs::write(dir.join("heatmaps").join(name), pgm_bytes(map))?;
        }
    }
    for (k, map) in traj.final_stack.maps().iter().enumerate() {
        let name = format!("final_tok{k}_{}.pgm", file_stem(&map.token));
        fs::write(dir.join("heatmaps").join(name), pgm_bytes(map))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::run;

    #[test]
    fn minimal_file_round_trips() {
        let text = "AMAP 1 1 1 1\ncat\n5.0000000000000000e-1\n";
        let stack = parse_map_file(text).unwrap();
        assert_eq!(stack.maps()[0].values(), &[0.5]);
        assert_eq!(write_map_file(&stack), text);
    }

    #[test]
    fn seeded_stack_round_trips_bit_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let logits: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..256).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let stack =
            AttentionStack::from_logits(&["a".into(), "b".into()], 16, 16, 0, &logits).unwrap();
        let text = write_map_file(&stack);
        let back = parse_map_file(&text).unwrap();
        for (x, y) in stack.maps().iter().zip(back.maps()) {
            assert_eq!(x.values(), y.values());
        }
        assert_eq!(write_map_file(&back), text);
    }

    #[test]
    fn truncated_file_names_missing_block() {
        let text = "AMAP 1 2 2 2\na b\n1 2\n3 4\n5 6\n";
        let err = parse_map_file(text).unwrap_err().to_string();
        assert!(err.contains("missing block 2 of 2"), "{err}");
        assert!(err.contains("\"b\""), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("AMAP 2 1 1 1\na\n1\n", 1),
            ("MAP 1 1 1 1\na\n1\n", 1),
            ("AMAP 1 1 2 1\na\n1\n", 3),
            ("AMAP 1 1 1 1\na\nNaN\n", 3),
            ("AMAP 1 1 1 1\na\n-1\n", 3),
            ("AMAP 1 1 1 2\na\n1\n", 2),
            ("AMAP 1 1 1 1\na\n1\n2\n", 4),
        ];
        for (text, line) in cases {
            match parse_map_file(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(ExperimentConfig::from_json(
            r#"{"tokens": [{"id": "a", "kind": "subject"}], "bogus": 1}"#
        )
        .is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"tokens": [{"id": "a", "kind": "subject", "colour": 1}]}"#
        )
        .is_err());
        let cfg = ExperimentConfig::from_json(
            r#"{"tokens": [{"id": "a", "kind": "subject"}, {"id": "s", "kind": "context"}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.total_steps, 50);
        assert_eq!(cfg.optimize_steps, 25);
        assert_eq!(cfg.weights, LossWeights::default());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig::demo();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn pgm_scaling() {
        let map = AttentionMap::new("a", 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = pgm_bytes(&map);
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255]);
        let flat = AttentionMap::new("a", 1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(&pgm_bytes(&flat)[11..], &[0, 0]);
    }

    #[test]
    fn csv_has_one_row_per_step_and_exact_numbers() {
        let exp = ExperimentConfig {
            total_steps: 6,
            optimize_steps: 3,
            ..ExperimentConfig::demo()
        };
        let cfg = exp.sim_config();
        let traj = run(&cfg, &exp.blobs).unwrap();
        let csv = trajectory_csv(&traj, &cfg);
        let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows[0], "step,total,agg_sub,iso,max,agg_attr,grad_norm,morans_i_cat,morans_i_dog,d_over_dmax,overlap_ratio");
        assert_eq!(rows.len(), 7);
        let first: Vec<f64> = rows[1].split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(first[1], traj.records[0].state.loss.total);
        assert_eq!(first[6], traj.records[0].grad_norm);
        assert!(csv.contains("# metric_aggregation=euc"));
    }

    #[test]
    fn file_stem_sanitizes() {
        assert_eq!(file_stem("<sot>"), "_sot_");
        assert_eq!(file_stem("red-car_2"), "red-car_2");
    }
}
