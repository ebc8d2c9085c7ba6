use std::path::PathBuf;

use chrono::{DateTime, Utc};
use clap::{Args, Subcommand, ValueEnum};

use switchmon::config::Config;
use switchmon::sample::{format_ts, PollOutcome};
use switchmon::store::{RowFilter, Store, StoreError, StoredRow};

use crate::{usage, Failure};

#[derive(Args)]
pub struct QueryArgs {
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    what: What,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Jsonl,
}

#[derive(Subcommand)]
enum What {
    /// Most recent sample of a device.
    Latest { device: String },
    /// Rows with `from <= ts <= to` (RFC 3339), oldest first.
    Range {
        device: String,
        #[arg(long)]
        from: Option<DateTime<Utc>>,
        #[arg(long)]
        to: Option<DateTime<Utc>>,
        #[arg(long)]
        limit: Option<usize>,
        /// Include gap rows.
        #[arg(long)]
        gaps: bool,
    },
}

pub fn cmd_query(config: Option<Config>, args: QueryArgs) -> Result<(), Failure> {
    let path = args.store.or(config.map(|c| c.store_path)).unwrap_or_else(|| Config::default().store_path);
    let device = match &args.what {
        What::Latest { device } | What::Range { device, .. } => device.clone(),
    };
    if let What::Range { from: Some(f), to: Some(t), .. } = &args.what {
        if f > t {
            return Err(usage(format!("--from {} is after --to {}", format_ts(f), format_ts(t))));
        }
    }
    if let What::Range { limit: Some(0), .. } = &args.what {
        return Err(usage("--limit must be positive"));
    }
    let store = match Store::open_read_only(&path) {
        Ok(store) => store,
        Err(StoreError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
            println!("no data");
            return Ok(());
        }
        Err(e) => return Err(Failure::Runtime(anyhow::Error::new(e).context(format!("cannot open store {}", path.display())))),
    };
    if store.rows(&device).is_err() {
        let known: Vec<&str> = store.tables().collect();
        if known.is_empty() {
            println!("no data");
            return Ok(());
        }
        return Err(usage(format!("unknown device '{device}' (known: {})", known.join(", "))));
    }
    let rows: Vec<StoredRow> = match args.what {
        What::Latest { .. } => store.query_latest(&device).map_err(|e| usage(e))?.into_iter().cloned().collect(),
        What::Range { from, to, limit, gaps, .. } => {
            let filter = if gaps { RowFilter::All } else { RowFilter::SamplesOnly };
            store
                .query_range(
                    &device,
                    from.unwrap_or(DateTime::<Utc>::MIN_UTC),
                    to.unwrap_or(DateTime::<Utc>::MAX_UTC),
                    limit.unwrap_or(usize::MAX),
                    filter,
                )
                .map_err(|e| usage(e))?
                .rows
        }
    };
    if rows.is_empty() {
        println!("no data");
        return Ok(());
    }
    match args.format {
        Format::Jsonl => {
            for row in &rows {
                println!("{}", row.to_json());
            }
        }
        Format::Table => print_table(&rows),
    }
    Ok(())
}

fn print_table(rows: &[StoredRow]) {
    println!(
        "{:>6}  {:<24}  {:>8}  {:>8}  {:>7}  {:>5}  {:>9}  {:>10}",
        "id", "ts", "V", "A", "Hz", "PF", "W", "kWh"
    );
    for row in rows {
        match &row.outcome {
            PollOutcome::Sample(s) => println!(
                "{:>6}  {:<24}  {:>8.2}  {:>8.3}  {:>7.3}  {:>5.3}  {:>9.1}  {:>10.6}",
                row.id,
                format_ts(&s.ts),
                s.voltage,
                s.current,
                s.frequency,
                s.power_factor,
                s.active_power,
                s.energy
            ),
            PollOutcome::Gap(g) => println!("{:>6}  {:<24}  gap: {}", row.id, format_ts(&g.ts), g.reason),
        }
    }
}
