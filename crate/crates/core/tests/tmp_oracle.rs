use cfil_core::data::{generate_dataset, SyntheticFamilyModel};

#[test]
#[ignore]
fn pixel_oracle() {
    for seed in [1u64, 2, 3, 4, 5] {
        let sigma: f64 = std::env::var("BENCH_SIGMA").ok().and_then(|v| v.parse().ok()).unwrap_or(0.02);
        let g: usize = std::env::var("BENCH_G").ok().and_then(|v| v.parse().ok()).unwrap_or(6);
        let ds = generate_dataset(
            &SyntheticFamilyModel {
                family_count: 200,
                latent_dim: g,
                kin_strength: 0.9,
                noise_sigma: sigma,
            },
            seed,
        )
        .unwrap();
        let (_, test) = ds.select_split(1).unwrap();
        let mut scored: Vec<(f64, bool)> = test
            .iter()
            .map(|p| {
                let a = p.parent_image.values();
                let b = p.child_image.values();
                let n = a.len() as f64;
                let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
                let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
                let mut cov = 0.0;
                let mut va = 0.0;
                let mut vb = 0.0;
                for (&x, &y) in a.iter().zip(b) {
                    let dx = x as f64 - ma;
                    let dy = y as f64 - mb;
                    cov += dx * dy;
                    va += dx * dx;
                    vb += dy * dy;
                }
                (cov / (va.sqrt() * vb.sqrt()), p.label.is_positive())
            })
            .collect();
        // Best threshold accuracy by sweep.
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let total = scored.len() as f64;
        let total_pos = scored.iter().filter(|(_, l)| *l).count() as f64;
        let mut best = 0.0f64;
        for i in 0..=scored.len() {
            // predict positive for rank >= i
            let tp = scored[i..].iter().filter(|(_, l)| *l).count() as f64;
            let fp = scored[i..].len() as f64 - tp;
            let tn = (scored.len() - scored[i..].len()) as f64 - (total_pos - tp);
            let acc = (tp + tn) / total;
            best = best.max(acc);
        }
        // Mann-Whitney AUC of the correlation score.
        let mut won = 0.0;
        let mut pairs = 0.0;
        for (sp, lp) in &scored {
            if !lp { continue; }
            for (sn, ln) in &scored {
                if *ln { continue; }
                pairs += 1.0;
                if sp > sn { won += 1.0; } else if sp == sn { won += 0.5; }
            }
        }
        println!("seed {seed}: oracle best-threshold acc {:.3}, auc {:.4}", best, won / pairs);
    }
}
