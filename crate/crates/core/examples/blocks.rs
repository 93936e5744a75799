//! Runs an FRM and a PGM block on a random feature map and prints the channel
//! gate, the attention range and the output shapes.
//!
//! cargo run --release -p mpgnet --example blocks

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpgnet::blocks::{FrmBlock, PgmBlock};
use mpgnet::engine::{Mode, Shape4, Tape, Tensor};
use mpgnet::nn::{Forward, ParamStore};

fn main() -> mpgnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f32>::new();
    let frm = FrmBlock::new(&mut store, &mut rng, "frm", 16, 4)?;
    let pgm = PgmBlock::new(&mut store, &mut rng, "pgm", 16, 8)?;

    let shape = Shape4::new(1, 16, 8, 12);
    let x = Tensor::from_fn(shape, |_, c, _, _| rng.gen_range(-1.0..1.0) * (1.0 + c as f32 / 8.0));

    let mut tape = Tape::new();
    let input = tape.constant(x)?;
    let mut f = Forward::new(&mut tape, &store, Mode::Eval)?;
    let refined = frm.forward_with_gate(&mut f, input)?;
    let guided = pgm.forward(&mut f, refined.refined)?;

    let gate = f.tape.value(refined.gate).data().to_vec();
    println!("FRM gate per channel:");
    for (c, g) in gate.iter().enumerate() {
        println!("  c{c:<2} {g:.4}");
    }
    let attention = f.tape.value(guided.attention);
    let lo = attention.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = attention.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    println!("PGM attention range: [{lo:.4}, {hi:.4}]");
    println!("refined {:?}", f.tape.shape(refined.refined).dims());
    println!("fused   {:?}", f.tape.shape(guided.fused).dims());
    println!("logits  {:?}", f.tape.shape(guided.aux_logits).dims());
    Ok(())
}
