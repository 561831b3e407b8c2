//! `wasi cost`: analytic FLOP and memory sweep written as CSV.

use std::path::PathBuf;

use clap::Args;
use wasi_core::cost::{sweep, write_csv, RankRule, SweepGrid};

use super::{out_dir, parse_dims, Failure};
use crate::config::Config;
use crate::GlobalArgs;

#[derive(Args, Debug)]
pub struct CostArgs {
    /// Batch sizes.
    #[arg(long, value_delimiter = ',')]
    pub batch: Option<Vec<usize>>,
    /// Token extents per grid point, comma separated, e.g. `16,4x4`.
    #[arg(long, value_delimiter = ',')]
    pub spatial: Option<Vec<String>>,
    /// `IxO` pairs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Weight ranks `K`.
    #[arg(long, value_delimiter = ',')]
    pub weight_ranks: Option<Vec<usize>>,
    /// Activation rank rules: `full`, `match`, `uniform:<r>`, `fixed:<r1>x<r2>x...`.
    #[arg(long, value_delimiter = ',')]
    pub activation_ranks: Option<Vec<String>>,
    /// CSV file name inside the output directory; `-` for stdout.
    #[arg(long, default_value = "cost.csv")]
    pub csv: String,
    /// Also draw the ratios against `K` as an SVG line chart.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

fn rule(s: &str) -> Result<RankRule, Failure> {
    let bad = || Failure::usage(format!("unknown activation rank rule {s:?}"));
    Ok(match s.split_once(':') {
        None if s == "full" => RankRule::Full,
        None if s == "match" => RankRule::MatchWeight,
        Some(("uniform", r)) => RankRule::Uniform(r.parse().map_err(|_| bad())?),
        Some(("fixed", r)) => RankRule::Fixed(parse_dims(r)?),
        _ => return Err(bad()),
    })
}

fn pair(s: &str) -> Result<(usize, usize), Failure> {
    match parse_dims(s)?.as_slice() {
        [i, o] => Ok((*i, *o)),
        _ => Err(Failure::usage(format!("expected IxO, got {s:?}"))),
    }
}

pub fn run(global: &GlobalArgs, cfg: &Config, args: CostArgs) -> Result<(), Failure> {
    let sec = &cfg.cost;
    let spatial = args.spatial.or(sec.spatial.clone()).unwrap_or_else(|| vec!["16".into()]);
    let features = args.features.or(sec.features.clone()).unwrap_or_else(|| vec!["64x64".into()]);
    let rules = args.activation_ranks.or(sec.activation_ranks.clone()).unwrap_or_else(|| vec!["match".into()]);
    let grid = SweepGrid {
        batch: args.batch.or(sec.batch.clone()).unwrap_or_else(|| vec![8]),
        spatial: spatial.iter().map(|s| parse_dims(s)).collect::<Result<_, _>>()?,
        features: features.iter().map(|s| pair(s)).collect::<Result<_, _>>()?,
        weight_ranks: args.weight_ranks.or(sec.weight_ranks.clone()).unwrap_or_else(|| vec![2, 4, 8, 16, 32]),
        activation_ranks: rules.iter().map(|s| rule(s)).collect::<Result<_, _>>()?,
    };
    let reports = sweep(&grid)?;

    if args.csv == "-" {
        write_csv(&reports, std::io::stdout().lock())?;
    } else {
        let dir = out_dir(&global.out)?;
        let path = dir.join(&args.csv);
        let f = std::fs::File::create(&path)
            .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
        write_csv(&reports, std::io::BufWriter::new(f))?;
        println!("{} rows -> {}", reports.len(), path.display());
    }
    if let Some(svg) = args.svg.or(sec.svg.clone()) {
        let path = if svg.is_absolute() { svg } else { out_dir(&global.out)?.join(svg) };
        std::fs::write(&path, crate::svg::ratio_chart(&reports))
            .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}
