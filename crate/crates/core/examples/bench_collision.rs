use boltzslab::collision::*;
use boltzslab::grid::*;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let grid = build_grid(24, 6.0, 32).unwrap();
    let op = CollisionOperator::new(&grid);
    println!("setup 24^3: {:?}", t0.elapsed());
    let m = grid.maxwellian(&FluidState::standard());
    let t0 = Instant::now();
    let out = op.apply(&grid, &m, &m);
    println!("B(M,M) on (24,6,32): {:?}", t0.elapsed());
    let supm = m.iter().cloned().fold(0.0f64, f64::max);
    let sup = out.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    println!("sup|B(M,M)|/supM = {:.3e}", sup / supm);

    let g16 = build_grid(16, 6.0, 32).unwrap();
    let t0 = Instant::now();
    let k = LinearizedKernel::assemble(&g16, &FluidState::standard());
    println!("kernel assembly 16^3/32: {:?}", t0.elapsed());
    let t0 = Instant::now();
    let x: Vec<f64> = (0..g16.len()).map(|i| (i as f64).sin()).collect();
    let y = k.apply_ref(&x);
    println!("matvec 16^3: {:?}  (y0={:.3e})", t0.elapsed(), y[0]);

    let g16b = build_grid(16, 6.0, 8).unwrap();
    let op16 = CollisionOperator::new(&g16b);
    let m16 = g16b.maxwellian(&FluidState::standard());
    let t0 = Instant::now();
    let _ = op16.apply(&g16b, &m16, &m16);
    println!("B eval on (16,6,8): {:?}", t0.elapsed());
}
