use std::time::Instant;

use phyulstm::dataset::{generate_synthetic_dataset, Split};
use phyulstm::dynamics::{GroundMotionConfig, OscillatorParams};
use phyulstm::grid::Grid3;
use phyulstm::model::PhyUlstm;
use phyulstm::tape::{BnMode, Tape};
use phyulstm::unet::UNetPlan;

fn main() {
    let mut set = generate_synthetic_dataset(
        50, 20.0, 0.05, &OscillatorParams::default(), 1.5, 7,
        &GroundMotionConfig::default(),
    ).unwrap();
    set.split(10, 7).unwrap();
    let train = set.split_records(Split::Train);
    let b = train.len();
    let t = train[0].len();
    let mut data = Vec::new();
    for r in &train { data.extend_from_slice(&r.ag); }
    let ag = Grid3::from_vec(b, t, 1, data).unwrap();

    let mut model = PhyUlstm::init(&UNetPlan::default(), 100, 2, 7).unwrap();

    let s = Instant::now();
    let mut tape = Tape::new();
    let agv = tape.constant(ag.clone());
    let fwd = model.forward(&mut tape, agv, BnMode::Train).unwrap();
    println!("forward: {:?} ({} nodes)", s.elapsed(), tape.len());

    let s = Instant::now();
    let sq = tape.mul(fwd.pred_norm, fwd.pred_norm).unwrap();
    let loss = tape.mean_sq(sq);
    tape.backward(loss).unwrap();
    println!("backward: {:?}", s.elapsed());

    let s = Instant::now();
    let mut tape = Tape::new();
    let agv = tape.constant(ag.clone());
    let fwd = model.forward(&mut tape, agv, BnMode::Train).unwrap();
    let sq = tape.mul(fwd.pred_norm, fwd.pred_norm).unwrap();
    let loss = tape.mean_sq(sq);
    tape.backward(loss).unwrap();
    println!("epoch2 (fwd+bwd): {:?}", s.elapsed());

    let mut tape = Tape::new();
    let agv = tape.constant(ag.clone());

    let s = Instant::now();
    let un = phyulstm::unet::unet_forward(&mut tape, agv, &mut model.unet, BnMode::Train).unwrap();
    println!("unet fwd: {:?}", s.elapsed());

    let s = Instant::now();
    let lv = model.lstm.to_vars(&mut tape);
    let _ = phyulstm::lstm::deep_lstm_forward(&mut tape, un.out, &model.lstm, &lv).unwrap();
    println!("lstm fwd: {:?}", s.elapsed());
}
