//! One train-mode forward pass of the default-width model at 216×496, printing
//! the bottleneck and every supervision head shape.
//!
//! cargo run --release -p mpgnet --example full_size_shapes

use std::time::Instant;

use mpgnet::engine::{Mode, Shape4, Tape, Tensor};
use mpgnet::model::{Model, ModelConfig};

fn main() -> mpgnet::Result<()> {
    let model = Model::<f32>::build(ModelConfig::default(), 0)?;
    println!("{} parameters", model.parameter_count());
    let input = Tensor::from_fn(Shape4::new(1, 1, 216, 496), |_, _, y, x| ((y * 7 + x * 3) % 11) as f32 / 10.0);
    let start = Instant::now();
    let mut tape = Tape::new();
    let x = tape.constant(input)?;
    let (pass, _) = model.forward_pure(&mut tape, x, Mode::Train)?;
    let out = &pass.output;
    println!("bottleneck  {:?}", tape.shape(out.bottleneck).dims());
    for (i, &a) in out.aux_logits.iter().enumerate() {
        println!("aux head {}  {:?}", i + 1, tape.shape(a).dims());
    }
    println!("final probs {:?}", tape.shape(out.final_probs).dims());
    println!("forward in {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}
