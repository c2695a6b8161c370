//! Window attention with several query streams sharing one key/value map,
//! checked against its probability rows.
//!
//! cargo run --example attention

use mujica::ops::attention::window_attention;
use mujica::params::Init;

fn main() -> mujica::Result<()> {
    let (windows, s, dim, heads) = (3, 4, 8, 2);
    let mut init = Init::new(11);
    let kv = [windows, s * s, dim];
    let k = init.uniform::<f64>(&kv, 1.0);
    let v = init.uniform::<f64>(&kv, 1.0);
    let own = init.uniform::<f64>(&kv, 1.0);
    let other = init.uniform::<f64>(&kv, 1.0);
    let span = (2 * s - 1) * (2 * s - 1);
    let b_own = init.uniform::<f64>(&[heads, span], 0.1);
    let b_other = init.uniform::<f64>(&[heads, span], 0.1);

    let single = window_attention(&[&own], &k, &v, &[&b_own], heads, s)?;
    let joint = window_attention(&[&own, &other], &k, &v, &[&b_own, &b_other], heads, s)?;

    let n = s * s;
    let worst = joint.probs.chunks(n).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    println!("{} probability rows, worst |sum - 1| = {worst:.2e}", joint.probs.len() / n);

    // the joint output is the sum of the per-stream outputs
    let alone = window_attention(&[&other], &k, &v, &[&b_other], heads, s)?;
    let gap = joint
        .out
        .data()
        .iter()
        .zip(single.out.data().iter().zip(alone.out.data()))
        .map(|(j, (a, b))| (j - a - b).abs())
        .fold(0.0, f64::max);
    println!("two-stream output vs sum of single streams: max gap {gap:.2e}");
    Ok(())
}
