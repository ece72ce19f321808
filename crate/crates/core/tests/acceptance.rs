//! Acceptance checks: one PASS/FAIL line per criterion, each with its
//! runtime budget. Exits nonzero if any check fails.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use promptbench_core::experiment::{
    format_mean_std, render_table, run_experiment, ExperimentConfig, Layout, RunOptions,
    TableFormat, RESULTS_FILE,
};
use promptbench_core::io;
use promptbench_core::metrics::{dice, edt, nsd};
use promptbench_core::phantom::{self, PhantomParams};
use promptbench_core::rng::{derive_seeds, SplitMix64};
use promptbench_core::sampling::{region_permutation, sample_prompts};
use promptbench_core::stats::paired_ttest;
use promptbench_core::subregion::{avg_pool, decompose};
use promptbench_core::volume::{Grid, Mask};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unit(rng: &mut SplitMix64) -> f64 {
    (rng.next() >> 11) as f64 / (1u64 << 53) as f64
}

/// Random mask: either voxel noise of random density or a phantom blob.
fn random_mask(rng: &mut SplitMix64, max_dim: usize, spacing: bool) -> Mask {
    let dims = [0; 3].map(|_| 1 + rng.below(max_dim as u64) as usize);
    let sp = if spacing {
        [0; 3].map(|_| 0.5 + 2.0 * unit(rng))
    } else {
        [1.0; 3]
    };
    let grid = Grid::new(dims, sp, [0.0; 3]).unwrap();
    if rng.below(2) == 0 {
        let density = unit(rng);
        let mut r = SplitMix64::new(rng.next());
        Mask::from_fn(grid, |_, _, _| unit(&mut r) < density)
    } else {
        let c = dims.map(|d| d as f64 / 2.0);
        let rad = dims.map(|d| (d as f64 / 2.0) * (0.4 + 0.8 * unit(rng)));
        Mask::from_fn(grid, |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            (0..3).map(|a| ((p[a] - c[a]) / rad[a].max(0.5)).powi(2)).sum::<f64>() <= 1.0
        })
    }
}

/// Sum of the mask over the k³ window at (x, y, z), zero outside.
fn window_sum(m: &Mask, [x, y, z]: [usize; 3], k: usize) -> f64 {
    let h = (k / 2) as i64;
    let d = m.dims();
    let mut s = 0.0;
    for dz in -h..=h {
        for dy in -h..=h {
            for dx in -h..=h {
                let p = [x as i64 + dx, y as i64 + dy, z as i64 + dz];
                if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < d[a])
                    && m.get(p[0] as usize, p[1] as usize, p[2] as usize)
                {
                    s += 1.0;
                }
            }
        }
    }
    s
}

fn brute_decompose(m: &Mask) -> [Mask; 3] {
    let g = *m.grid();
    let full = |v, k: usize| window_sum(m, v, k) < (k * k * k) as f64;
    let b = Mask::from_fn(g, |x, y, z| m.get(x, y, z) && full([x, y, z], 3));
    let mm = Mask::from_fn(g, |x, y, z| m.get(x, y, z) && !b.get(x, y, z) && full([x, y, z], 7));
    let c = Mask::from_fn(g, |x, y, z| m.get(x, y, z) && !b.get(x, y, z) && !mm.get(x, y, z));
    [b, mm, c]
}

fn check_subregions() -> Check {
    let grid = Grid::isotropic([9, 9, 9]).unwrap();
    let cube = Mask::from_fn(grid, |x, y, z| [x, y, z].iter().all(|v| (1..8).contains(v)));
    let s = decompose(&cube);
    ensure(s.counts() == [218, 124, 1], || format!("cube counts {:?}", s.counts()))?;
    let [b, m, c] = brute_decompose(&cube);
    ensure(
        s.boundary == b && s.margin == m && s.center == c,
        || "cube disagrees with brute force".into(),
    )?;

    let mut rng = SplitMix64::new(0xacce_0001);
    for i in 0..200 {
        let mask = random_mask(&mut rng, 32, false);
        let s = decompose(&mask);
        let union = s.boundary.union(&s.margin).unwrap().union(&s.center).unwrap();
        let disjoint = s.boundary.data().iter().zip(s.margin.data()).zip(s.center.data())
            .all(|((&b, &m), &c)| u8::from(b) + u8::from(m) + u8::from(c) <= 1);
        ensure(union == mask && disjoint, || format!("partition broken on mask {i}"))?;
        if i < 20 && mask.grid().len() <= 4096 {
            let [b, m, c] = brute_decompose(&mask);
            ensure(s.boundary == b && s.margin == m && s.center == c, || {
                format!("mask {i} disagrees with brute force")
            })?;
        }
    }
    Ok("7³ cube → 218/124/1; partition holds on 200 random masks".into())
}

fn check_pooling() -> Check {
    let mut rng = SplitMix64::new(0xacce_0002);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mask = random_mask(&mut rng, 16, false);
        for k in [3, 7] {
            let pooled = avg_pool(&mask, k).unwrap();
            let norm = (k * k * k) as f64;
            for v in 0..mask.grid().len() {
                let c = mask.grid().coords(v);
                let diff = (pooled.data()[v] - window_sum(&mask, c, k) / norm).abs();
                worst = worst.max(diff);
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 masks, k ∈ {{3,7}}, max deviation {worst:.1e}"))
}

fn check_sampler() -> Check {
    let mut rng = SplitMix64::new(0xacce_0003);
    let none = HashSet::new();
    for case in 0..1000 {
        let region = random_mask(&mut rng, 8, false);
        let seed = rng.next();
        let p1 = region_permutation(&region, seed);
        let p2 = region_permutation(&region, seed);
        ensure(p1 == p2, || format!("case {case}: permutation not deterministic"))?;
        let total = region.count();
        let m = rng.below(total as u64 + 3) as usize;
        let n = rng.below(m as u64 + 1) as usize;
        let big = sample_prompts(&region, m, seed, &none).voxels();
        let small = sample_prompts(&region, n, seed, &none).voxels();
        ensure(big.len() == m.min(total) && small.len() == n.min(total), || {
            format!("case {case}: wrong sample sizes")
        })?;
        ensure(big.starts_with(&small), || format!("case {case}: sample({n}) is not a prefix of sample({m})"))?;
        ensure(big[..] == p1[..big.len()], || format!("case {case}: sample is not a permutation prefix"))?;
    }

    let grid = Grid::isotropic([10, 1, 1]).unwrap();
    let region = Mask::from_fn(grid, |_, _, _| true);
    let mut hits = [0usize; 10];
    for seed in 0..10_000u64 {
        let v = sample_prompts(&region, 1, seed, &none).voxels()[0];
        hits[v[0]] += 1;
    }
    let freqs = hits.map(|h| h as f64 / 10_000.0);
    ensure(freqs.iter().all(|f| (f - 0.1).abs() <= 0.02), || format!("frequencies {freqs:?}"))?;
    let (lo, hi) = freqs.iter().fold((1.0f64, 0.0f64), |(a, b), &f| (a.min(f), b.max(f)));
    Ok(format!("1000 cases deterministic + prefix; single-draw frequencies in [{lo:.4}, {hi:.4}]"))
}

fn brute_surface(m: &Mask) -> Vec<[usize; 3]> {
    let d = m.dims();
    m.voxels()
        .into_iter()
        .filter(|&[x, y, z]| {
            let p = [x as i64, y as i64, z as i64];
            [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
                .iter()
                .any(|o: &[i64; 3]| {
                    let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                    !(0..3).all(|a| q[a] >= 0 && (q[a] as usize) < d[a])
                        || !m.get(q[0] as usize, q[1] as usize, q[2] as usize)
                })
        })
        .collect()
}

fn mm_dist(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| ((a[i] as f64 - b[i] as f64) * s[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn brute_nsd(p: &Mask, g: &Mask, tau: f64) -> f64 {
    let s = p.spacing();
    let (sp, sg) = (brute_surface(p), brute_surface(g));
    if sp.is_empty() && sg.is_empty() {
        return 1.0;
    }
    if sp.is_empty() || sg.is_empty() {
        return 0.0;
    }
    let within = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .filter(|&&a| to.iter().map(|&b| mm_dist(a, b, s)).fold(f64::INFINITY, f64::min) <= tau + 1e-9)
            .count()
    };
    (within(&sp, &sg) + within(&sg, &sp)) as f64 / (sp.len() + sg.len()) as f64
}

fn check_metrics() -> Check {
    let mut rng = SplitMix64::new(0xacce_0004);
    let mut worst_nsd: f64 = 0.0;
    let mut worst_edt: f64 = 0.0;
    for case in 0..100 {
        let a = random_mask(&mut rng, 16, case % 2 == 1);
        let grid = *a.grid();
        let mut r = SplitMix64::new(rng.next());
        let density = unit(&mut rng);
        let b = Mask::from_fn(grid, |x, y, z| {
            if unit(&mut r) < 0.15 { unit(&mut r) < density } else { a.get(x, y, z) }
        });

        let inter = a.intersection(&b).unwrap().count();
        let expected = if a.count() + b.count() == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (a.count() + b.count()) as f64
        };
        ensure(dice(&a, &b).unwrap() == expected, || format!("case {case}: dice mismatch"))?;

        let tau = [0.0, 1.0, 1.5, 2.5][case % 4];
        let got = nsd(&a, &b, tau).unwrap();
        worst_nsd = worst_nsd.max((got - brute_nsd(&a, &b, tau)).abs());

        if !b.is_empty() {
            let field = edt(&b).unwrap();
            let fg = b.voxels();
            let s = grid.spacing;
            for v in 0..grid.len() {
                let c = grid.coords(v);
                let truth = fg.iter().map(|&f| mm_dist(c, f, s)).fold(f64::INFINITY, f64::min);
                let err = (field.data()[v] - truth).abs() / truth.max(1e-300);
                worst_edt = worst_edt.max(if truth == 0.0 { field.data()[v] } else { err });
            }
        }

        ensure(dice(&a, &a).unwrap() == 1.0 && nsd(&a, &a, 0.0).unwrap() == 1.0, || {
            format!("case {case}: identity not exact")
        })?;
    }
    ensure(worst_nsd <= 1e-9, || format!("nsd deviation {worst_nsd:e}"))?;
    ensure(worst_edt <= 1e-6, || format!("edt relative deviation {worst_edt:e}"))?;
    Ok(format!("100 pairs; nsd dev {worst_nsd:.1e}, edt rel dev {worst_edt:.1e}, identity exact"))
}

/// Γ(x) for x a positive multiple of 1/2, by the recurrence Γ(x+1) = xΓ(x).
fn half_gamma(x: f64) -> f64 {
    let (mut g, mut k) = if (x.fract() - 0.5).abs() < 1e-12 {
        (std::f64::consts::PI.sqrt(), 0.5)
    } else {
        (1.0, 1.0)
    };
    while k < x - 1e-9 {
        g *= k;
        k += 1.0;
    }
    g
}

/// Two-tailed p-value by Simpson integration of the Student-t density.
fn integrated_p(t: f64, df: usize) -> f64 {
    let nu = df as f64;
    // Ratio of gammas via logs to stay finite for larger df.
    let c = (half_gamma((nu + 1.0) / 2.0).ln() - half_gamma(nu / 2.0).ln()).exp()
        / (nu * std::f64::consts::PI).sqrt();
    let f = |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let t = t.abs();
    let n = 200_000;
    let h = t / n as f64;
    let mut s = f(0.0) + f(t);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

fn check_stats() -> Check {
    let mut cases: Vec<Vec<f64>> = vec![vec![0.1, 0.2, 0.05, 0.15, 0.1]];
    let mut rng = SplitMix64::new(0xacce_0005);
    while cases.len() < 20 {
        let n = 2 + rng.below(20) as usize;
        let shift = 0.3 * unit(&mut rng) - 0.1;
        cases.push((0..n).map(|_| shift + 0.2 * (unit(&mut rng) - 0.5)).collect());
    }
    let mut worst: f64 = 0.0;
    for d in &cases {
        let zeros = vec![0.0; d.len()];
        let r = paired_ttest(d, &zeros).map_err(|e| e.to_string())?;
        let oracle = integrated_p(r.t, r.df);
        worst = worst.max((r.p - oracle).abs());
    }
    ensure(worst <= 1e-6, || format!("max p deviation {worst:e}"))?;
    let same = [0.4, 0.5, 0.6];
    let r = paired_ttest(&same, &same).map_err(|e| e.to_string())?;
    ensure(r.p == 1.0, || format!("zero difference gives p = {}", r.p))?;
    Ok(format!("20 cases, max p deviation {worst:.1e}; zero difference p = 1"))
}

fn write_phantoms(dir: &Path, count: usize, size: usize) -> String {
    let params = PhantomParams {
        dims: [size; 3],
        ..PhantomParams::default()
    };
    let mut subjects = Vec::new();
    for (i, seed) in derive_seeds(7, count).into_iter().enumerate() {
        let gt = phantom::blob(seed, &params);
        let name = format!("case_{i:03}.nii");
        io::save_mask(&gt, dir.join(&name)).unwrap();
        subjects.push(format!(r#"{{"case_id": "case_{i:03}", "gt": "{name}"}}"#));
    }
    format!("[{}]", subjects.join(","))
}

fn check_direction() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let subjects = write_phantoms(tmp.path(), 20, 32);
    let config = format!(
        r#"{{
        "subjects": {subjects},
        "strategies": [
            {{"name": "baseline", "kind": "random-whole", "counts": [1, 5]}},
            {{"name": "center", "kind": "region-constrained", "region": "C", "counts": [1]}},
            {{"name": "boundary", "kind": "region-constrained", "region": "B", "counts": [1]}},
            {{"name": "suggested", "kind": "cumulative",
              "initial": {{"region": "whole", "count": 1}}, "cumulative": {{"region": "C"}},
              "counts": [5]}}
        ],
        "num_seeds": 50,
        "backend": {{"kind": "synthetic-oracle", "r_base": 2.0, "alpha": 1.0, "r_neg": 0.0}},
        "output_dir": "out",
        "baseline": {{"strategy": "baseline", "count": 1}}
    }}"#
    );
    let config = ExperimentConfig::from_json_str(&config, tmp.path()).map_err(|e| e.to_string())?;
    let outcome = run_experiment(&config, &RunOptions::default()).map_err(|e| e.to_string())?;
    let t = &outcome.table;
    let mean = |s: &str, c: usize| t.get(s, c).map(|a| a.dice.mean).ok_or(format!("missing {s}@{c}"));
    let (center, boundary) = (mean("center", 1)?, mean("boundary", 1)?);
    let (suggested, base1, base5) = (mean("suggested", 5)?, mean("baseline", 1)?, mean("baseline", 5)?);
    let cmp = t
        .comparisons
        .iter()
        .find(|c| c.strategy == "suggested")
        .and_then(|c| c.test)
        .ok_or("no suggested-vs-baseline test")?;
    ensure(t.failed_cells == 0, || format!("{} failed cells", t.failed_cells))?;
    ensure(center >= boundary, || format!("(a) center {center:.3} < boundary {boundary:.3}"))?;
    ensure(suggested >= base1 && cmp.p < 0.05, || {
        format!("(b) suggested {suggested:.3} vs baseline {base1:.3}, p = {:.2e}", cmp.p)
    })?;
    ensure(base5 >= base1, || format!("(c) 5P {base5:.3} < 1P {base1:.3}"))?;
    Ok(format!(
        "(a) C {center:.3} ≥ B {boundary:.3}; (b) suggested {suggested:.3} ≥ baseline {base1:.3}, p = {:.1e}; (c) 5P {base5:.3} ≥ 1P {base1:.3}",
        cmp.p
    ))
}

fn check_grid_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let subjects = write_phantoms(tmp.path(), 4, 20);
    let config_for = |out: &str| {
        format!(
            r#"{{
            "subjects": {subjects},
            "strategies": [
                {{"name": "whole", "kind": "random-whole"}},
                {{"name": "margin", "kind": "region-constrained", "region": "M"}},
                {{"name": "init", "kind": "initial-varied",
                  "initial": {{"region": "whole", "count": 1}}, "cumulative": {{"region": "C"}},
                  "counts": [5, 10]}}
            ],
            "prompt_counts": [1, 5],
            "num_seeds": 6,
            "backend": {{"kind": "synthetic-oracle"}},
            "output_dir": "{out}"
        }}"#
        )
    };
    let one = ExperimentConfig::from_json_str(&config_for("one"), tmp.path()).map_err(|e| e.to_string())?;
    let many = ExperimentConfig::from_json_str(&config_for("many"), tmp.path()).map_err(|e| e.to_string())?;
    let a = run_experiment(&one, &RunOptions { workers: 1, ..RunOptions::default() }).map_err(|e| e.to_string())?;
    let b = run_experiment(&many, &RunOptions { workers: 4, ..RunOptions::default() }).map_err(|e| e.to_string())?;
    let read = |d: &str| fs::read(tmp.path().join(d).join(RESULTS_FILE)).unwrap();
    ensure(read("one") == read("many"), || "results.jsonl differs between 1 and 4 workers".into())?;
    ensure(a.table.aggregates == b.table.aggregates, || "aggregates differ".into())?;

    let again = run_experiment(&one, &RunOptions { workers: 3, ..RunOptions::default() }).map_err(|e| e.to_string())?;
    ensure(again.computed == 0 && again.reused == a.computed, || {
        format!("rerun computed {} cells", again.computed)
    })?;
    ensure(read("one") == read("many"), || "rerun changed results.jsonl".into())?;
    ensure(again.table.aggregates == a.table.aggregates, || "rerun changed aggregates".into())?;
    Ok(format!("{} cells byte-identical across 1/4 workers; rerun recomputed 0", a.computed))
}

fn check_report() -> Check {
    ensure(format_mean_std(0.637, 0.014) == ".637±.014", || "0.637/0.014".into())?;
    ensure(format_mean_std(0.657, 0.008) == ".657±.008", || "0.657/0.008".into())?;
    ensure(format_mean_std(1.0, 0.0) == "1.000±.000", || "1.0/0.0".into())?;

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let subjects = write_phantoms(tmp.path(), 2, 24);
    let strategies: Vec<String> = ["B", "M", "C", "B+M", "B+C", "M+C"]
        .iter()
        .map(|r| format!(r#"{{"name": "{r}", "kind": "region-constrained", "region": "{r}"}}"#))
        .chain([r#"{"name": "whole", "kind": "random-whole"}"#.to_string()])
        .collect();
    let config = format!(
        r#"{{"subjects": {subjects}, "strategies": [{}], "num_seeds": 50,
            "backend": {{"kind": "synthetic-oracle"}}, "output_dir": "out"}}"#,
        strategies.join(",")
    );
    let config = ExperimentConfig::from_json_str(&config, tmp.path()).map_err(|e| e.to_string())?;
    let outcome = run_experiment(&config, &RunOptions::default()).map_err(|e| e.to_string())?;
    let rendered = render_table(&outcome.table, Layout::Table1, TableFormat::Markdown);
    ensure(rendered.warnings.is_empty(), || format!("warnings: {:?}", rendered.warnings))?;
    let on_disk = fs::read_to_string(tmp.path().join("out/table1.md")).map_err(|e| e.to_string())?;
    ensure(on_disk == rendered.text, || "table1.md differs from render_table".into())?;

    let lines: Vec<&str> = rendered.text.lines().collect();
    ensure(lines.len() == 9, || format!("{} lines, expected header + rule + 7 rows", lines.len()))?;
    let expected_header = "| B | M | C | Dice 1P | Dice 5P | Dice 10P | Dice 20P | Dice 100P \
                           | NSD 1P | NSD 5P | NSD 10P | NSD 20P | NSD 100P |";
    ensure(lines[0] == expected_header, || format!("header {:?}", lines[0]))?;
    let presence = [
        "✓ | ✗ | ✗", "✗ | ✓ | ✗", "✗ | ✗ | ✓", "✓ | ✓ | ✗", "✓ | ✗ | ✓", "✗ | ✓ | ✓", "✓ | ✓ | ✓",
    ];
    for (row, p) in lines[2..].iter().zip(presence) {
        let cells: Vec<&str> = row.trim_matches('|').split('|').map(str::trim).collect();
        ensure(cells.len() == 13, || format!("row has {} cells", cells.len()))?;
        ensure(row.starts_with(&format!("| {p} |")), || format!("row {row:?} expected {p}"))?;
    }
    // Each value column has at least one bold best.
    for col in 3..13 {
        let bold = lines[2..]
            .iter()
            .filter(|r| r.trim_matches('|').split('|').nth(col).is_some_and(|c| c.contains("**")))
            .count();
        ensure(bold >= 1, || format!("column {col} has no bold cell"))?;
    }
    Ok("\".637±.014\"; Table 1 shape 7 rows × (3 + 5 + 5) columns".into())
}

fn main() {
    let checks: [(&str, u64, fn() -> Check); 8] = [
        ("subregion-exactness", 5, check_subregions),
        ("pooling-oracle", 10, check_pooling),
        ("sampler-determinism-prefix", 30, check_sampler),
        ("metric-oracles", 60, check_metrics),
        ("paired-ttest", 30, check_stats),
        ("direction-reproduction", 300, check_direction),
        ("grid-determinism-resume", 120, check_grid_determinism),
        ("report-fidelity", 120, check_report),
    ];
    let mut failed = 0;
    for (name, budget, check) in checks {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(budget);
        match result {
            Ok(detail) if !over => println!("PASS {name}: {detail} [{:.2}s]", elapsed.as_secs_f64()),
            Ok(detail) => {
                failed += 1;
                println!("FAIL {name}: over {budget}s budget: {detail} [{:.2}s]", elapsed.as_secs_f64());
            }
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{:.2}s]", elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
