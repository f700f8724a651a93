//! Write a synthetic long-format dataset: `cargo run --example synth_csv -- out.csv [seed]`.

use std::error::Error;
use std::fs::File;
use std::io::BufWriter;

use vegcast_core::synth::{generate, SynthConfig};

fn main() -> Result<(), Box<dyn Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "synthetic.csv".into());
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let cfg = SynthConfig {
        seed,
        ..Default::default()
    };
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
    w.write_record(["variable", "lon", "lat", "year", "month", "value"])?;
    for r in generate(&cfg) {
        w.write_record([
            r.variable,
            r.lon.to_string(),
            r.lat.to_string(),
            r.year.to_string(),
            r.month.to_string(),
            r.value.to_string(),
        ])?;
    }
    w.flush()?;
    println!("{path}");
    Ok(())
}
