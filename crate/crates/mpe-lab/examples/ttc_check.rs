fn main() {
    let cuts = mpe_lab::clearing::ttc_parametric_cutoffs(0.6, 0.2, 0.2).unwrap();
    println!("parametric: v1={:.6} v2r1={:.6} v2r2={:.6}", cuts.v1_cut, cuts.v2_round1, cuts.v2_round2);
    for seed in [1u64, 2, 3, 2024, 77, 1234] {
        let (s1, s2, s3) = mpe_lab::mechanism::simulate_ttc_two_school(0.6, 0.2, 0.2, 1_000_000, seed);
        println!(
            "seed {seed}: d1={:+.5} d2={:+.5} d3={:+.5}",
            s1 - cuts.v1_cut,
            s2 - cuts.v2_round1,
            s3 - cuts.v2_round2
        );
    }
}
