//! Visualize the masking strategies on a 2-D patch grid: random, block,
//! and inverse block, before and after assimilation to the exact count.

use d2v2::masking::{
    assimilate, count_start_points, sample_mask, sample_mask_blocks, seeded_rng, target_kept,
    Layout, MaskConfig, MaskPlan, MaskStrategy,
};

fn render(plan: &MaskPlan) -> String {
    let (rows, cols) = match plan.layout() {
        Layout::TwoD { rows, cols } => (rows, cols),
        Layout::OneD { len } => (1, len),
    };
    let mut s = String::new();
    for r in 0..rows {
        s.push_str("    ");
        for c in 0..cols {
            s.push(if plan.kept()[r * cols + c] { '#' } else { '.' });
        }
        s.push('\n');
    }
    s
}

fn main() {
    let layout = Layout::TwoD { rows: 12, cols: 12 };
    let l = layout.len();
    let r = 0.8;

    println!("12x12 grid, mask ratio R = {r} -> exactly {} positions stay visible\n", target_kept(l, r));

    for (name, strategy, block) in [
        ("random", MaskStrategy::Random, 1),
        ("block  (covered = masked)", MaskStrategy::Block, 9),
        ("inverse block (covered = KEPT)", MaskStrategy::InverseBlock, 9),
    ] {
        let cfg = MaskConfig { strategy, mask_ratio: r, adjust: 0.1, block, block_side: None };
        let mut rng = seeded_rng(42);
        let raw = sample_mask_blocks(&cfg, layout, &mut rng).unwrap();
        let plan = assimilate(raw.clone(), target_kept(l, r), &mut rng);
        println!("{name}  (B = {block}, '#' = visible)");
        println!("  before assimilation: {} kept", raw.kept_count());
        print!("{}", render(&raw));
        println!("  after assimilation:  {} kept", plan.kept_count());
        print!("{}", render(&plan));
        println!();
    }

    // the start-point formula in action
    println!("start points for L=144, A=0.1:");
    for (r, b) in [(0.8, 9), (0.8, 4), (0.5, 9)] {
        println!(
            "  R={r}, B={b}: floor(144 * ((1-R)+A)/B) = {}",
            count_start_points(144, r, 0.1, b)
        );
    }

    // every draw keeps exactly the same count
    let cfg = MaskConfig {
        strategy: MaskStrategy::InverseBlock,
        mask_ratio: 0.5,
        adjust: 0.1,
        block: 3,
        block_side: None,
    };
    let counts: Vec<usize> = (0..1000)
        .map(|s| sample_mask(&cfg, layout, &mut seeded_rng(s)).unwrap().kept_count())
        .collect();
    assert!(counts.iter().all(|&c| c == target_kept(l, 0.5)));
    println!("\n1000 draws at R=0.5: every plan keeps exactly {} positions", counts[0]);
}
