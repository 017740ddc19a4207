use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use mpcc_core::data::{gen_pair, make_domain_datasets, Category, Dataset, DomainSpec, ShapeSpec};
use mpcc_core::model::{
    analytic_macs, evaluate, load_model, train_loop, Model, ModelConfig, CONFIG_SNAPSHOT,
};
use mpcc_core::rng::derive_seed;
use mpcc_core::zorder::{cdps, paired_center_gap};
use mpcc_core::{Error, PointCloud, Result};

use crate::{BenchArgs, EvalArgs, ExportArgs, GenDataArgs, ScanArgs, TrainArgs};

pub const SEED_ENV: &str = "MPCC_SEED";

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn resolve_config(path: Option<&Path>) -> Result<ModelConfig> {
    let mut cfg = match path {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_config(cfg: &ModelConfig) {
    println!("# resolved config (seed {})", cfg.seed);
    print!("{cfg}");
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ))
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let seed = seed_override()?.unwrap_or(a.seed);
    let source = DomainSpec::source_default();
    let mut target = DomainSpec::target_default();
    if let Some(v) = a.target_noise {
        target.noise_sigma = v;
    }
    if let Some(v) = a.target_dropout {
        target.dropout_ratio = v;
    }
    source.validate()?;
    target.validate()?;
    println!("# resolved config (seed {seed})");
    println!("per_category = {}\npoints = {}", a.per_category, a.points);
    println!("source = {source:?}\ntarget = {target:?}");
    let ds = make_domain_datasets(a.per_category, a.points, &source, &target, seed)?;
    create_dir(&a.out)?;
    ds.write(&a.out, seed, &source, &target)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(a.config.as_deref())?;
    print_config(&cfg);
    require_dir(&a.source_dir)?;
    require_dir(&a.target_dir)?;
    if a.dry_run {
        println!("dry run: configuration valid");
        return Ok(());
    }
    let source = Dataset::read(&a.source_dir)?;
    let target = Dataset::read(&a.target_dir)?;
    let report = train_loop(&source, &target, &cfg, Some(&a.out))?;
    let last = report.losses.last().copied().unwrap_or_default();
    println!(
        "trained {} steps; final total {} (loss_cd {}, l_sp {}, l_ch {})",
        report.steps, last.total, last.loss_cd, last.l_sp, last.l_ch
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt, None)?;
    print_config(&model.cfg);
    let ds = Dataset::read(&a.data_dir)?;
    let table = evaluate(&model, &ds, a.metric)?;
    let csv = table.to_csv();
    print!("{csv}");
    write(&a.out, &csv)
}

pub fn scan(a: &ScanArgs) -> Result<()> {
    let c1 = PointCloud::read_xyz(&a.input)?;
    let c2 = PointCloud::read_xyz(&a.input2)?;
    println!(
        "# resolved config\ng = {}\nk = {}\nbits = {}\ninput = {}\ninput2 = {}",
        a.g,
        a.k,
        a.bits,
        a.input.display(),
        a.input2.display()
    );
    let (p1, p2, grid) = cdps(&c1, &c2, a.g, a.k, a.bits)?;
    println!("grid c_min = {:?} scale = {}", grid.c_min, grid.scale);
    let mut csv = String::from("cloud,patch,center_x,center_y,center_z,code_lo,code_hi\n");
    for (name, ps) in [("a", &p1), ("b", &p2)] {
        let dir = a.out.join(name);
        create_dir(&dir)?;
        for gi in 0..ps.g {
            PointCloud::new(ps.patch(gi).to_vec())?
                .write_xyz(dir.join(format!("patch_{gi:04}.xyz")))?;
            let c = ps.centers[gi];
            let (lo, hi) = ps.code_range(gi);
            let _ = writeln!(csv, "{name},{gi},{},{},{},{lo},{hi}", c[0], c[1], c[2]);
        }
    }
    write(&a.out.join("patches.csv"), &csv)
}

/// Config for a bench run at `points` input points with K held fixed.
fn bench_config(mut cfg: ModelConfig, points: usize) -> Result<ModelConfig> {
    let fold = cfg.fold_grid.points();
    if points % cfg.k != 0 || points % fold != 0 {
        return Err(Error::Config(format!(
            "--points {points} must be divisible by K = {} and the fold size {fold}",
            cfg.k
        )));
    }
    cfg.n_points = points;
    cfg.g = points / cfg.k;
    cfg.coarse_points = points / fold;
    cfg.validate()?;
    Ok(cfg)
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let model = match &a.ckpt {
        Some(ckpt) => {
            let dir = ckpt.parent().unwrap_or(Path::new("."));
            let mut cfg = bench_config(ModelConfig::load(dir.join(CONFIG_SNAPSHOT))?, a.points)?;
            if let Some(seed) = seed_override()? {
                cfg.seed = seed;
            }
            load_model(ckpt, Some(cfg))?
        }
        None => Model::new(bench_config(
            resolve_config(a.config.as_deref())?,
            a.points,
        )?)?,
    };
    let cfg = &model.cfg;
    print_config(cfg);
    let inputs: Vec<PointCloud> = (0..a.batch)
        .map(|i| {
            let spec = ShapeSpec {
                category: Category::ALL[i % Category::ALL.len()],
                n_points: a.points,
                seed: derive_seed(cfg.seed, i as u64),
            };
            gen_pair(&spec, &DomainSpec::target_default()).map(|p| p.0)
        })
        .collect::<Result<_>>()?;
    let params = model.num_params();
    let flops = 2 * analytic_macs(cfg, a.batch);
    let mut csv = String::from("rep,points,g,k,batch,params,flops,checksum\n");
    let mut timing = String::from("rep,seconds\n");
    let mut times = Vec::with_capacity(a.reps);
    for rep in 0..a.reps {
        let t0 = Instant::now();
        let out = model.complete(&inputs)?;
        let dt = t0.elapsed().as_secs_f64();
        times.push(dt);
        let checksum: f64 = out
            .clouds
            .iter()
            .flat_map(|c| c.points().iter().flatten())
            .sum();
        let _ = writeln!(
            csv,
            "{rep},{},{},{},{},{params},{flops},{checksum}",
            a.points, cfg.g, cfg.k, a.batch
        );
        let _ = writeln!(timing, "{rep},{dt}");
    }
    create_dir(&a.out)?;
    write(&a.out.join("bench.csv"), &csv)?;
    write(&a.out.join("timing.csv"), &timing)?;
    let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
    times.sort_by(f64::total_cmp);
    let median = times.get(times.len() / 2).copied().unwrap_or(0.0);
    println!(
        "params {params}\nflops {flops}\nmean_ms {:.3}\nmedian_ms {:.3}",
        mean * 1e3,
        median * 1e3
    );
    Ok(())
}

pub fn export_embed(a: &ExportArgs) -> Result<()> {
    let model = load_model(&a.ckpt, None)?;
    let cfg = &model.cfg;
    print_config(cfg);
    let source = Dataset::read(&a.source_dir)?;
    let target = Dataset::read(&a.target_dir)?;
    let mut csv = String::from("id,domain");
    for j in 0..cfg.d {
        let _ = write!(csv, ",f{j}");
    }
    csv.push('\n');
    for (domain, ds) in [("source", &source), ("target", &target)] {
        for chunk in ds.samples.chunks(cfg.batch) {
            let partials: Vec<PointCloud> = chunk.iter().map(|s| s.partial.clone()).collect();
            let out = model.complete(&partials)?;
            for (s, f) in chunk.iter().zip(&out.pooled) {
                let _ = write!(csv, "{},{domain}", s.id);
                for v in f {
                    let _ = write!(csv, ",{v}");
                }
                csv.push('\n');
            }
        }
    }
    write(&a.out, &csv)?;

    // same-index patch centre distance, shared vs independent grids
    let pairs = source.len().min(target.len());
    let (mut shared, mut independent) = (0.0, 0.0);
    for i in 0..pairs {
        let (s, t) = paired_center_gap(
            &source.samples[i].partial,
            &target.samples[i].partial,
            cfg.g,
            cfg.k,
            cfg.bits,
        )?;
        shared += s;
        independent += t;
    }
    let n = pairs.max(1) as f64;
    let stat = format!(
        "pairs,shared_grid_gap,independent_grid_gap\n{pairs},{},{}\n",
        shared / n,
        independent / n
    );
    let stat_path = a.out.with_extension("cdps.csv");
    write(&stat_path, &stat)?;
    Ok(())
}
