//! Measures how many input positions reach one output position of the
//! encoder, by back-propagating from a single row.
//!
//! `cargo run --release --example receptive_field -- [rate,rate,...]`

use fastre::encoder::{encode, BlockOptions, Dropout, EncoderConfig, EncoderParams, SegmentLayout};
use fastre::numerics::rng::{self, SeededRng};
use fastre::numerics::{ParamStore, Tape};

fn width(rates: &[usize]) -> fastre::Result<usize> {
    let config = EncoderConfig {
        layers: rates.len(),
        dilation_rates: rates.to_vec(),
        ..EncoderConfig::default()
    };
    let n = 99;
    let mut store = ParamStore::<f64>::new();
    let params = EncoderParams::init(&mut store, &config, &mut rng::seeded(0))?;
    let layout = SegmentLayout::new(&[n])?;
    let mut tape = Tape::new(&store);
    let x = tape.constant(rng::uniform(&[n, config.hidden], 1.0, &mut rng::seeded(1)));
    let h = encode(&mut tape, x, &params, &config, &layout, BlockOptions::default(), None::<&mut Dropout<'_, SeededRng>>)?;
    let row = tape.gather_rows(h, vec![n / 2])?;
    let loss = tape.sum(row);
    let grads = tape.backward(loss)?;
    let g = grads.wrt(x).expect("input is reachable");
    Ok((0..n).filter(|&i| g.row(i).iter().any(|v| *v != 0.0)).count())
}

fn main() -> fastre::Result<()> {
    let schedules: Vec<Vec<usize>> = match std::env::args().nth(1) {
        Some(arg) => vec![arg.split(',').map(|r| r.parse().expect("rates are integers")).collect()],
        None => vec![vec![1, 2, 4, 1, 1, 1], vec![1; 6], vec![1, 2, 4, 8, 16, 1]],
    };
    for rates in schedules {
        let config = EncoderConfig { layers: rates.len(), dilation_rates: rates.clone(), ..EncoderConfig::default() };
        println!("{rates:?}: measured {}, expected {}", width(&rates)?, config.receptive_field());
    }
    Ok(())
}
