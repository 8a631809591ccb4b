use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use neumat::datagen::{sample_queries, GenerateConfig, Heightfield, OracleOptions, Preset, QueryDataset, RECOMMENDED_PER_TEXEL};
use neumat::evaluate::{coarse_fine_means, lod_csv, lod_mse_table, LodConfig};
use neumat::image::{image_mse, Image, ImageFormat};
use neumat::render::{offset_visualization, render_reference, RenderOptions, Scene};
use neumat::trainer::{dataset_mse, train as run_training, TrainConfig, TrainOutputs};
use neumat::{load_material, save_material, Direction, Material, ModelShape};

use crate::{internal, EvalArgs, Failure, GenerateArgs, HeightfieldArgs, InspectArgs, RenderArgs, TrainArgs};

fn require_input(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{}: no such file", path.display());
    }
    Ok(())
}

fn require_output_dir(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            bail!("{}: output directory does not exist", p.display())
        }
        _ => Ok(()),
    }
}

/// `dir/stem.<tag>.ext` for `dir/stem.ext`.
fn tagged(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.{tag}.{ext}"),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

impl HeightfieldArgs {
    fn check_inputs(&self) -> anyhow::Result<()> {
        for p in self.heights.iter().chain(&self.albedo) {
            require_input(p)?;
        }
        if let Some(p) = &self.preset {
            p.parse::<Preset>()?;
        }
        if let Some(r) = self.hf_resolution {
            if !r.is_power_of_two() {
                bail!("--hf-resolution must be a power of two");
            }
        }
        Ok(())
    }

    fn load(&self, k: usize) -> anyhow::Result<Option<Heightfield>> {
        if let Some(p) = &self.preset {
            let res = self.hf_resolution.unwrap_or(1 << k);
            return Ok(Some(Heightfield::preset(p.parse()?, res)));
        }
        if let Some(h) = &self.heights {
            return Ok(Some(Heightfield::from_png(h, self.albedo.as_deref(), self.height_scale)?));
        }
        Ok(None)
    }

    fn given(&self) -> bool {
        self.preset.is_some() || self.heights.is_some()
    }
}

pub fn generate(a: GenerateArgs) -> Result<(), Failure> {
    a.hf.check_inputs()?;
    require_output_dir(&a.output)?;
    if !a.hf.given() {
        return Err(anyhow!("need --preset or --heights").into());
    }
    if a.k > 12 {
        return Err(anyhow!("--k {} is too large (at most 12)", a.k).into());
    }
    if a.per_texel == 0 || a.samples == 0 {
        return Err(anyhow!("--per-texel and --samples must be positive").into());
    }
    if !(a.light_cone >= 0.0 && a.light_cone < 90.0) {
        return Err(anyhow!("--light-cone must be in [0, 90)").into());
    }
    if !RECOMMENDED_PER_TEXEL.contains(&a.per_texel) && !a.force {
        eprintln!(
            "warning: --per-texel {} is outside the recommended {}-{} queries per texel (use --force to silence)",
            a.per_texel,
            RECOMMENDED_PER_TEXEL.start(),
            RECOMMENDED_PER_TEXEL.end()
        );
    }
    let hf = a.hf.load(a.k)?.expect("checked above");
    let cfg = GenerateConfig {
        k: a.k,
        per_texel: a.per_texel,
        samples: a.samples,
        seed: a.seed,
        oracle: OracleOptions {
            light_cone_deg: a.light_cone,
            indirect: a.indirect,
        },
    };
    let start = Instant::now();
    let ds = sample_queries(&hf, &cfg);
    ds.write(&a.output)?;
    println!(
        "wrote {} records to {} in {:.2} s",
        ds.len(),
        a.output.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    require_input(&a.dataset)?;
    require_output_dir(&a.output)?;
    let loss_log = a.loss_log.clone().unwrap_or_else(|| a.output.with_extension("loss.tsv"));
    require_output_dir(&loss_log)?;
    let ds = QueryDataset::read(&a.dataset)?;
    let config = TrainConfig {
        shape: ModelShape {
            k: ds.k as usize,
            channels: a.channels,
            offset_channels: a.offset_channels,
            with_offset: !a.baseline,
        },
        batch_size: a.batch,
        iterations: a.iters,
        learning_rate: a.lr,
        blur_sigma_init: a.blur_sigma,
        blur_half_life: a.half_life,
        seed: a.seed,
        baseline_only: a.baseline,
        checkpoint_every: a.checkpoint_every,
    };
    let outputs = TrainOutputs {
        loss_log: Some(loss_log.clone()),
        checkpoint_base: a.checkpoint_every.map(|_| a.output.clone()),
    };
    let start = Instant::now();
    let out = run_training::<f32>(&ds, &config, &outputs)?;
    if !out.material.is_finite() {
        return Err(internal("trained material has non-finite parameters"));
    }
    save_material(&out.material, &a.output)?;
    println!(
        "trained {} iterations on {} records in {:.2} s",
        a.iters,
        ds.len(),
        start.elapsed().as_secs_f64()
    );
    println!("final dataset mse: {:.9e}", out.final_mse);
    println!("wrote {} and {}", a.output.display(), loss_log.display());
    Ok(())
}

pub fn render(a: RenderArgs) -> Result<(), Failure> {
    require_input(&a.scene)?;
    require_output_dir(&a.output)?;
    a.hf.check_inputs()?;
    let format = ImageFormat::from_path(&a.output)?;
    let mut scene = Scene::from_file(&a.scene)?;
    let material_path = a
        .material
        .clone()
        .or_else(|| scene.material.clone())
        .ok_or_else(|| anyhow!("no material: pass --material or set `material` in the scene"))?;
    require_input(&material_path)?;
    if a.reference && !a.hf.given() {
        return Err(anyhow!("--reference needs --preset or --heights").into());
    }
    if let Some(s) = a.spp {
        scene.spp = s;
    }
    if let Some(s) = a.seed {
        scene.seed = s;
    }
    scene.validate()?;
    if a.lod_sweep == Some(0) {
        return Err(anyhow!("--lod-sweep must be at least 1").into());
    }
    let material: Material = load_material(&material_path)?;
    let k = material.shape().k;
    let hf = if a.reference { a.hf.load(k)? } else { None };
    let opts = RenderOptions { batch_size: a.batch };
    let oracle = OracleOptions {
        light_cone_deg: a.light_cone,
        indirect: false,
    };
    let jobs: Vec<(Scene, PathBuf)> = match a.lod_sweep {
        None => vec![(scene, a.output.clone())],
        Some(n) => (0..n)
            .map(|i| {
                (
                    scene.with_camera_distance_scale((i as f64).exp2()),
                    tagged(&a.output, &format!("lod{i}")),
                )
            })
            .collect(),
    };
    for (s, path) in jobs {
        let start = Instant::now();
        let img = neumat::render::render(&s, &material, &opts)?;
        img.save(&path, format)?;
        println!("wrote {} in {:.2} s", path.display(), start.elapsed().as_secs_f64());
        if let Some(hf) = &hf {
            let ref_img = render_reference(&s, hf, k, a.ref_samples, oracle, &opts)?;
            let ref_path = tagged(&path, "reference");
            ref_img.save(&ref_path, format)?;
            println!("wrote {}", ref_path.display());
            println!("image mse: {:.9e}", image_mse(&img, &ref_img)?);
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    require_input(&a.material)?;
    if let Some(d) = &a.dataset {
        require_input(d)?;
    }
    if let Some(c) = &a.csv {
        require_output_dir(c)?;
    }
    a.hf.check_inputs()?;
    if a.dataset.is_none() && !a.hf.given() {
        return Err(anyhow!("nothing to evaluate: pass --dataset and/or --preset/--heights").into());
    }
    let material: Material = load_material(&a.material)?;
    let k = material.shape().k;
    if let Some(d) = &a.dataset {
        let ds = QueryDataset::read(d)?;
        if ds.k as usize != k {
            return Err(anyhow!("dataset was generated for k = {}, material has k = {k}", ds.k).into());
        }
        let mse = dataset_mse(&material, &ds.records);
        println!("dataset mse: {:.9e} ({} records)", mse, ds.len());
    }
    if let Some(hf) = a.hf.load(k)? {
        let levels = a.levels.clone().unwrap_or_else(|| (0..=k).collect());
        let cfg = LodConfig {
            resolution: a.lod_resolution,
            directions: a.directions,
            samples: a.ref_samples,
            seed: a.seed,
            oracle: OracleOptions {
                light_cone_deg: a.light_cone,
                indirect: false,
            },
        };
        let rows = lod_mse_table(&material, &hf, &levels, &cfg)?;
        println!("level  sigma        mse");
        for r in &rows {
            println!("{:>5}  {:<11.6}  {:.6e}", r.level, r.sigma, r.mse);
        }
        if rows.len() >= 2 {
            let (coarse, fine) = coarse_fine_means(&rows);
            println!("coarse-half mean {coarse:.6e}, fine-half mean {fine:.6e}");
        }
        if let Some(path) = &a.csv {
            std::fs::write(path, lod_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn stats(data: &[f32]) -> (f32, f32, f64, f64) {
    let n = data.len().max(1) as f64;
    let min = data.iter().copied().fold(f32::INFINITY, f32::min);
    let max = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (min, max, mean, var.sqrt())
}

fn parse_direction(s: &str) -> anyhow::Result<Direction<f32>> {
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| anyhow!("--offset-vis expects `x,y`, got `{s}`"))?;
    let x: f32 = x.trim().parse().with_context(|| format!("bad x in `{s}`"))?;
    let y: f32 = y.trim().parse().with_context(|| format!("bad y in `{s}`"))?;
    Ok(Direction::new(x, y)?)
}

pub fn inspect(a: InspectArgs) -> Result<(), Failure> {
    require_input(&a.material)?;
    let dirs = a
        .offset_vis
        .iter()
        .map(|s| parse_direction(s))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let m: Material = load_material(&a.material)?;
    let s = m.shape();
    println!("file: {}", a.material.display());
    println!("format: NMAT v{}", neumat::io::MATERIAL_VERSION);
    println!(
        "k: {}  channels: {}  offset channels: {}  offset module: {}",
        s.k,
        s.channels,
        s.offset_channels,
        if s.with_offset { "yes" } else { "no" }
    );
    let hash: String = m.provenance.dataset_hash.iter().map(|b| format!("{b:02x}")).collect();
    println!("trained iterations: {}", m.provenance.iterations);
    println!("dataset sha256: {hash}");
    let decoder = m.decoder().param_count();
    let offset_mlp = m.offset().map_or(0, |o| o.mlp().param_count());
    let (tex, net) = m.param_counts();
    println!("parameters: decoder={decoder} offset={offset_mlp} textures={tex} total={}", tex + net);
    let offset_c = if s.with_offset { s.offset_channels } else { 0 };
    println!(
        "texture channels per texel: {} (pyramid {} + offset {})",
        s.channels + offset_c,
        s.channels,
        offset_c
    );
    for (i, level) in m.pyramid().levels().iter().enumerate() {
        let (min, max, mean, std) = stats(level.data());
        let r = level.resolution();
        println!("level {i:>2} {r:>5}x{r:<5} min {min:+.4} max {max:+.4} mean {mean:+.5} std {std:.5}");
    }
    if let Some(o) = m.offset() {
        let (min, max, mean, std) = stats(o.texture().data());
        let r = o.texture().resolution();
        println!("offset   {r:>5}x{r:<5} min {min:+.4} max {max:+.4} mean {mean:+.5} std {std:.5}");
    }
    for (wo, label) in dirs.into_iter().zip(&a.offset_vis) {
        let res = m.offset().map(|o| o.texture().resolution()).unwrap_or(1);
        let img: Image = offset_visualization(&m, wo, a.offset_scale, res)
            .ok_or_else(|| anyhow!("material has no offset module to visualize"))?;
        let name = format!("offset_{}.png", label.replace(',', "_"));
        let path = match &a.vis_prefix {
            Some(p) => PathBuf::from(format!("{}{name}", p.display())),
            None => a.material.with_file_name(format!(
                "{}.{name}",
                a.material.file_stem().and_then(|x| x.to_str()).unwrap_or("material")
            )),
        };
        img.save(&path, ImageFormat::Png)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
