//! Plain-text model checkpoints: a header then one parameter per line.
//!
//! ```text
//! poisonbench-model 1
//! kind meanpool_lr
//! dim 16
//! hidden 0
//! seed 11
//! params 17
//! 0.123…
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so reading a
//! checkpoint back reproduces every bit of `theta`.

use std::fmt::Write as _;

use super::model::{ModelKind, SurrogateModel};

const MAGIC: &str = "poisonbench-model 1";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("missing or wrong header line {0}")]
    Header(usize),
    #[error("parameter count mismatch: header says {declared}, kind implies {implied}")]
    ParamCount { declared: usize, implied: usize },
    #[error("bad parameter on line {0}")]
    Param(usize),
}

pub fn encode(model: &SurrogateModel) -> String {
    let mut s = String::new();
    writeln!(s, "{MAGIC}").unwrap();
    writeln!(s, "kind {}", model.kind.name()).unwrap();
    writeln!(s, "dim {}", model.dim).unwrap();
    writeln!(s, "hidden {}", model.kind.hidden()).unwrap();
    writeln!(s, "seed {}", model.seed).unwrap();
    writeln!(s, "params {}", model.theta.len()).unwrap();
    for t in &model.theta {
        writeln!(s, "{t:?}").unwrap();
    }
    s
}

pub fn decode(text: &str) -> Result<SurrogateModel, CheckpointError> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(CheckpointError::Header(1));
    }
    let mut field = |line_no: usize, key: &str| -> Result<String, CheckpointError> {
        let line = lines.next().ok_or(CheckpointError::Header(line_no))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or(CheckpointError::Header(line_no))
    };
    let kind_name = field(2, "kind")?;
    let dim: usize = field(3, "dim")?.parse().map_err(|_| CheckpointError::Header(3))?;
    let hidden: usize = field(4, "hidden")?.parse().map_err(|_| CheckpointError::Header(4))?;
    let seed: u64 = field(5, "seed")?.parse().map_err(|_| CheckpointError::Header(5))?;
    let declared: usize = field(6, "params")?.parse().map_err(|_| CheckpointError::Header(6))?;
    let kind = match kind_name.as_str() {
        "meanpool_lr" => ModelKind::MeanpoolLr,
        "tiny_mlp" if hidden > 0 => ModelKind::TinyMlp { hidden },
        _ => return Err(CheckpointError::Header(2)),
    };
    let implied = kind.param_count(dim);
    if declared != implied {
        return Err(CheckpointError::ParamCount { declared, implied });
    }
    let theta = lines
        .take(declared)
        .enumerate()
        .map(|(i, l)| l.trim().parse::<f64>().map_err(|_| CheckpointError::Param(7 + i)))
        .collect::<Result<Vec<_>, _>>()?;
    if theta.len() != declared || theta.iter().any(|t| !t.is_finite()) {
        return Err(CheckpointError::Param(7 + theta.len()));
    }
    Ok(SurrogateModel {
        kind,
        dim,
        seed,
        theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            seed in any::<u64>(),
            hidden in 1usize..6,
            raw in proptest::collection::vec(-1e6f64..1e6, 1..64),
        ) {
            let dim = 4;
            let mut m = SurrogateModel::init(ModelKind::TinyMlp { hidden }, dim, seed);
            for (t, r) in m.theta.iter_mut().zip(raw.iter().cycle()) {
                *t = r * 1.000_000_1 / 3.0;
            }
            let back = decode(&encode(&m)).unwrap();
            prop_assert_eq!(back.kind, m.kind);
            prop_assert_eq!(back.seed, m.seed);
            for (a, b) in back.theta.iter().zip(&m.theta) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_headers() {
        assert_eq!(decode("nope"), Err(CheckpointError::Header(1)));
        let m = SurrogateModel::zeros(ModelKind::MeanpoolLr, 2, 1);
        let text = encode(&m).replace("params 3", "params 4");
        assert!(matches!(decode(&text), Err(CheckpointError::ParamCount { .. })));
        let truncated: String = encode(&m).lines().take(8).map(|l| format!("{l}\n")).collect();
        assert!(matches!(decode(&truncated), Err(CheckpointError::Param(_))));
    }
}
