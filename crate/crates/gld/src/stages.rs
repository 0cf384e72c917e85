//! Experiment stages over a run directory. Each stage reads the artifacts of
//! earlier stages, refuses ones produced under a different configuration, and
//! writes its own artifacts tagged with the config hash.
//!
//! ```text
//! <run>/geoenc.safetensors  stats.json  rgbdec.safetensors
//! <run>/mvdiff_level{0..3}.safetensors  mvdiff_cascade_1to0.safetensors
//! <run>/recon.csv eval.csv eval_report.json sweep.csv ablation.csv pck.csv attention.csv
//! <run>/logs/*.csv  <run>/samples/<scene_id>/  <run>/report/
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use gld_core::scene::{generate_scene, gt_correspondences};
use gld_core::stats::LatentStats;
use gld_core::{MultiViewSequence, NUM_LEVELS};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dataset::{read_dataset, read_manifest, write_dataset, write_generation, write_json, write_png, DatasetManifest};
use crate::error::{GldError, Result};
use crate::eval::{
    ablation_csv, attention_csv, attention_probe, boundary_sweep, cascade_ablation, eval_csv, eval_cases, evaluate,
    pck_csv, probe_pck, request_for, sweep_csv, AblationRow, AttentionPck, EvalCase, EvalReport, PckRow, SweepRow,
};
use crate::geoenc::{train_geoenc, GeoEncoder};
use crate::latent::{compute_latent_stats, load_stats_file, normalize_level, save_stats_tagged};
use crate::mvdiff::{condition_for_split, train_diffusion, DiffusionModel, CHECKPOINT_KIND as MVDIFF_KIND};
use crate::params::{load_checkpoint, sha256_hex};
use crate::pipeline::{gaussian, generate, GenerationOptions, ModelSet, SamplerConfig};
use crate::report::{emit_report, tag_csv, ReportManifest, SampleMeta};
use crate::rgbdec::{recon_csv, recon_report, train_rgbdec, RgbDecoder, ReconRow};
use crate::train::{TrainConfig, TrainLog};

pub const CONFIG_HASH_KEY: &str = "config_hash";
pub const DATA_HASH_KEY: &str = "data_hash";

/// Paths of the models a generation stage loads.
#[derive(Debug, Clone)]
pub struct ModelPaths {
    pub geo: PathBuf,
    pub decoder: PathBuf,
    pub stats: PathBuf,
    pub levels: [PathBuf; NUM_LEVELS],
    pub cascade: PathBuf,
}

pub struct Run {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
    pub data_dir: PathBuf,
}

impl Run {
    /// `dir` defaults to `config.output_dir` and `data_dir` to `<dir>/data`.
    pub fn new(config: ExperimentConfig, dir: Option<PathBuf>, data_dir: Option<PathBuf>) -> Self {
        let dir = dir.unwrap_or_else(|| config.output_dir.clone());
        let data_dir = data_dir.unwrap_or_else(|| dir.join("data"));
        Self {
            hash: config.hash(),
            config,
            dir,
            data_dir,
        }
    }

    pub fn geo_path(&self) -> PathBuf {
        self.dir.join("geoenc.safetensors")
    }

    pub fn decoder_path(&self) -> PathBuf {
        self.dir.join("rgbdec.safetensors")
    }

    pub fn stats_path(&self) -> PathBuf {
        self.dir.join("stats.json")
    }

    pub fn diffusion_path(&self, level: usize, cascade: bool) -> PathBuf {
        let name = self.config.diffusion.model(level, cascade).name();
        self.dir.join(format!("{MVDIFF_KIND}_{name}.safetensors"))
    }

    pub fn model_paths(&self) -> ModelPaths {
        ModelPaths {
            geo: self.geo_path(),
            decoder: self.decoder_path(),
            stats: self.stats_path(),
            levels: std::array::from_fn(|l| self.diffusion_path(l, false)),
            cascade: self.diffusion_path(0, true),
        }
    }

    /// Hash of the settings that determine the dataset bytes, so a corpus can
    /// be shared across runs that differ only in training settings.
    pub fn data_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            data: &'a crate::config::DataConfig,
        }
        let json = serde_json::to_string(&Key {
            seed: self.config.seed,
            data: &self.config.data,
        })
        .expect("serializable");
        sha256_hex(json.as_bytes())[..16].to_string()
    }

    fn tags(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            (CONFIG_HASH_KEY.to_string(), self.hash.clone()),
            (DATA_HASH_KEY.to_string(), self.data_hash()),
        ])
    }

    fn check_hash(&self, what: &Path, key: &str, expected: &str, found: Option<&str>) -> Result<()> {
        match found {
            Some(f) if f == expected => Ok(()),
            found => Err(GldError::FingerprintMismatch {
                what: format!("{key} of {}", what.display()),
                expected: expected.to_string(),
                found: found.unwrap_or("none").to_string(),
            }),
        }
    }

    fn check_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = load_checkpoint(path)?;
        self.check_hash(path, CONFIG_HASH_KEY, &self.hash, ck.get_meta(CONFIG_HASH_KEY).ok())
    }

    fn train_config(&self, t: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: t.seed.wrapping_add(self.config.seed),
            ..t.clone()
        }
    }

    fn write_csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        crate::dataset::write_bytes(&p, tag_csv(&self.hash, body).as_bytes())?;
        Ok(p)
    }

    fn write_log(&self, name: &str, log: &TrainLog) -> Result<PathBuf> {
        self.write_csv(&format!("logs/{name}.csv"), &log.to_csv())
    }

    // -- data -------------------------------------------------------------

    pub fn gen_data(&self) -> Result<DatasetManifest> {
        let seqs = self
            .config
            .data
            .scene_specs(self.config.seed)
            .iter()
            .map(|s| Ok(generate_scene(s)?))
            .collect::<Result<Vec<_>>>()?;
        write_dataset(&self.data_dir, &seqs, self.tags())
    }

    pub fn load_data(&self) -> Result<Vec<MultiViewSequence>> {
        let m = read_manifest(&self.data_dir)?;
        let path = self.data_dir.join("manifest.json");
        self.check_hash(&path, DATA_HASH_KEY, &self.data_hash(), m.tags.get(DATA_HASH_KEY).map(String::as_str))?;
        read_dataset(&self.data_dir)
    }

    /// `(train, eval)` scenes.
    pub fn splits(&self) -> Result<(Vec<MultiViewSequence>, Vec<MultiViewSequence>)> {
        let data = self.load_data()?;
        let (tr, ev) = self.config.data.split(data.len());
        Ok((data[tr].to_vec(), data[ev].to_vec()))
    }

    // -- training ---------------------------------------------------------

    pub fn train_geo(&self) -> Result<(GeoEncoder, TrainLog)> {
        let (train, _) = self.splits()?;
        let (geo, log) = train_geoenc(&train, self.config.geo.clone(), &self.train_config(&self.config.geo_train))?;
        geo.save(&self.geo_path(), self.tags())?;
        self.write_log("geoenc", &log)?;
        Ok((geo, log))
    }

    pub fn load_geo(&self, path: &Path) -> Result<GeoEncoder> {
        self.check_checkpoint(path)?;
        GeoEncoder::load(path)
    }

    pub fn compute_stats(&self) -> Result<LatentStats> {
        let geo = self.load_geo(&self.geo_path())?;
        let (train, _) = self.splits()?;
        let stats = compute_latent_stats(&geo, &train, self.config.eval.window)?;
        save_stats_tagged(&self.stats_path(), &stats, self.tags())?;
        Ok(stats)
    }

    pub fn load_stats(&self, path: &Path) -> Result<LatentStats> {
        let f = load_stats_file(path)?;
        self.check_hash(path, CONFIG_HASH_KEY, &self.hash, f.tags.get(CONFIG_HASH_KEY).map(String::as_str))?;
        Ok(f.stats)
    }

    /// Trains the decoder, then reports per-level reconstruction on the
    /// evaluation scenes.
    pub fn train_dec(&self) -> Result<Vec<ReconRow>> {
        let geo = self.load_geo(&self.geo_path())?;
        let (train, eval) = self.splits()?;
        let w = self.config.eval.window;
        let (dec, log) = train_rgbdec(&geo, &train, w, self.config.decoder.clone(), &self.train_config(&self.config.decoder_train))?;
        dec.save(&self.decoder_path(), self.tags())?;
        self.write_log("rgbdec", &log)?;
        let rows = recon_report(&geo, &dec, &eval, w)?;
        self.write_csv("recon.csv", &recon_csv(&rows))?;
        Ok(rows)
    }

    pub fn load_decoder(&self, path: &Path, geo: &GeoEncoder) -> Result<RgbDecoder> {
        self.check_checkpoint(path)?;
        RgbDecoder::load(path, geo)
    }

    pub fn train_diff(&self, level: usize, cascade: bool) -> Result<TrainLog> {
        let geo = self.load_geo(&self.geo_path())?;
        let stats = self.load_stats(&self.stats_path())?;
        let (train, _) = self.splits()?;
        let cfg = self.config.diffusion.model(level, cascade);
        let name = cfg.name();
        let (model, log) = train_diffusion(
            &geo,
            &stats,
            &train,
            cfg,
            &self.config.diffusion_data,
            &self.train_config(&self.config.diffusion_train),
        )?;
        model.save(&self.diffusion_path(level, cascade), self.tags())?;
        self.write_log(&format!("{MVDIFF_KIND}_{name}"), &log)?;
        Ok(log)
    }

    pub fn load_diffusion(&self, path: &Path, geo: &GeoEncoder, stats: &LatentStats) -> Result<DiffusionModel> {
        self.check_checkpoint(path)?;
        DiffusionModel::load(path, geo, stats)
    }

    /// Loads the encoder, decoder and statistics, plus every diffusion model
    /// whose checkpoint exists.
    pub fn load_models(&self, paths: &ModelPaths) -> Result<ModelSet> {
        let geo = self.load_geo(&paths.geo)?;
        let decoder = self.load_decoder(&paths.decoder, &geo)?;
        let stats = self.load_stats(&paths.stats)?;
        let mut levels: [Option<DiffusionModel>; NUM_LEVELS] = Default::default();
        for (slot, p) in levels.iter_mut().zip(&paths.levels) {
            if p.exists() {
                *slot = Some(self.load_diffusion(p, &geo, &stats)?);
            }
        }
        let cascade = if paths.cascade.exists() {
            Some(self.load_diffusion(&paths.cascade, &geo, &stats)?)
        } else {
            None
        };
        let m = ModelSet {
            geo,
            decoder,
            stats,
            levels,
            cascade,
        };
        m.check()?;
        Ok(m)
    }

    // -- generation and evaluation ----------------------------------------

    pub fn options(&self) -> GenerationOptions {
        GenerationOptions {
            boundary: self.config.eval.boundary,
            use_cascade: self.config.eval.use_cascade,
        }
    }

    pub fn eval_cases(&self, data: &[MultiViewSequence]) -> Result<Vec<EvalCase>> {
        let e = &self.config.eval;
        eval_cases(data, e.views, e.n_sources, e.seed)
    }

    fn sampler_for(&self, case: &EvalCase) -> SamplerConfig {
        SamplerConfig {
            seed: self.config.sampler.seed ^ case.seed,
            ..self.config.sampler.clone()
        }
    }

    /// Generates the targets of every evaluation case into
    /// `<run>/samples/<scene_id>/`.
    pub fn sample(&self, models: &ModelSet, opts: GenerationOptions) -> Result<Vec<PathBuf>> {
        let (_, eval) = self.splits()?;
        let mut dirs = Vec::new();
        for case in self.eval_cases(&eval)? {
            let seq = &eval[case.scene];
            let req = request_for(seq, &case.split, models.geo.dtype())?;
            let r = generate(models, &req, opts, &self.sampler_for(&case))?;
            let dir = self.dir.join("samples").join(&case.scene_id);
            let split = &case.split;
            let tgt_frames: Vec<usize> = r.target_positions.iter().map(|&p| split.frames[p]).collect();
            let tgt_cams: Vec<_> = tgt_frames.iter().map(|&f| seq.views[f].camera).collect();
            write_generation(&dir, &r, &tgt_cams, &self.hash)?;
            for &f in &split.sources {
                write_png(&dir.join("sources").join(format!("view_{f:02}.png")), &seq.views[f].image)?;
            }
            for (i, &f) in tgt_frames.iter().enumerate() {
                write_png(&dir.join("gt").join(format!("view_{i:02}.png")), &seq.views[f].image)?;
            }
            write_json(
                &dir.join("meta.json"),
                &SampleMeta {
                    config_hash: self.hash.clone(),
                    scene_id: case.scene_id.clone(),
                    frames: split.frames.clone(),
                    sources: split.sources.clone(),
                    targets: tgt_frames,
                    boundary: r.boundary,
                    cascaded: r.cascaded,
                },
            )?;
            dirs.push(dir);
        }
        Ok(dirs)
    }

    pub fn eval(&self, models: &ModelSet) -> Result<EvalReport> {
        let (_, eval) = self.splits()?;
        let cases = self.eval_cases(&eval)?;
        let rows = evaluate(models, &eval, &cases, self.options(), &self.config.sampler)?;
        self.write_csv("eval.csv", &eval_csv(&rows))?;
        let report = EvalReport::new(&self.hash, &models.geo.fingerprint()?, rows);
        write_json(&self.dir.join("eval_report.json"), &report)?;
        Ok(report)
    }

    pub fn sweep(&self, models: &ModelSet) -> Result<Vec<SweepRow>> {
        let (_, eval) = self.splits()?;
        let cases = self.eval_cases(&eval)?;
        let rows = boundary_sweep(models, &eval, &cases, &self.config.sampler)?;
        self.write_csv("sweep.csv", &sweep_csv(&rows))?;
        Ok(rows)
    }

    pub fn ablate(&self, models: &ModelSet) -> Result<Vec<AblationRow>> {
        let (_, eval) = self.splits()?;
        let cases = self.eval_cases(&eval)?;
        let rows = cascade_ablation(models, &eval, &cases, &self.config.sampler)?;
        self.write_csv("ablation.csv", &ablation_csv(&rows))?;
        Ok(rows)
    }

    /// Feature PCK of every level; with a level-1 diffusion model present,
    /// also the per-layer attention PCK between a source and a target view.
    pub fn probe(&self, geo: &GeoEncoder, level1: Option<(&DiffusionModel, &LatentStats)>) -> Result<(Vec<PckRow>, Vec<AttentionPck>)> {
        let (_, eval) = self.splits()?;
        let e = &self.config.eval;
        let rows = probe_pck(geo, &eval, e.pck_pairs, e.tau_px)?;
        self.write_csv("pck.csv", &pck_csv(&rows))?;
        let mut attn = Vec::new();
        if let Some((model, stats)) = level1 {
            let level = model.config.level;
            let t = e.attention_t;
            let mut acc: Vec<(f64, f64, usize)> = Vec::new();
            for case in self.eval_cases(&eval)? {
                let seq = &eval[case.scene];
                let split = &case.split;
                let mask = split.target_mask();
                let (Some(a), Some(b)) = (mask.iter().position(|m| !m), mask.iter().position(|m| *m)) else {
                    continue;
                };
                let corr = gt_correspondences(seq, split.frames[a], split.frames[b], e.pck_pairs)?;
                if corr.pairs.is_empty() {
                    continue;
                }
                let clean = geo.encode_sequence(seq, &split.frames)?;
                let f = normalize_level(&clean.levels[level], stats, level)?;
                let eps = Tensor::from_vec(gaussian(f.dims(), case.seed), f.dims(), f.device())?.to_dtype(f.dtype())?;
                let z = ((f * (1.0 - t))? + (eps * t)?)?;
                let cond = condition_for_split(geo, stats, seq, split, level)?;
                let rows = attention_probe(model, &z, t, &cond, (a, b), &corr.pairs, e.tau_px)?;
                let n = corr.pairs.len();
                if acc.is_empty() {
                    acc = vec![(0.0, 0.0, 0); rows.len()];
                    attn = rows.clone();
                }
                for (slot, r) in acc.iter_mut().zip(&rows) {
                    slot.0 += r.pck * n as f64;
                    slot.1 += r.chance * n as f64;
                    slot.2 += n;
                }
            }
            for (r, (p, c, n)) in attn.iter_mut().zip(&acc) {
                r.pck = p / *n as f64;
                r.chance = c / *n as f64;
            }
            self.write_csv("attention.csv", &attention_csv(&attn))?;
        }
        Ok((rows, attn))
    }

    pub fn report(&self) -> Result<ReportManifest> {
        emit_report(&self.dir, &self.hash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::toy();
        c.data.scenes = 2;
        c.data.image_width = 16;
        c.data.image_height = 16;
        c.data.n_views = 4;
        c.geo_train.steps = 1;
        c
    }

    #[test]
    fn stages_refuse_foreign_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(tiny(), Some(dir.path().to_path_buf()), None);
        run.gen_data().unwrap();
        run.train_geo().unwrap();
        assert!(run.load_geo(&run.geo_path()).is_ok());

        // Same data settings, different training settings: the corpus is
        // reusable but the encoder is not.
        let mut other = tiny();
        other.geo_train.steps = 2;
        let run2 = Run::new(other, Some(dir.path().to_path_buf()), None);
        assert_eq!(run2.data_hash(), run.data_hash());
        assert!(run2.load_data().is_ok());
        assert!(matches!(run2.compute_stats(), Err(GldError::FingerprintMismatch { .. })));

        let mut other = tiny();
        other.seed = 9;
        let run3 = Run::new(other, Some(dir.path().to_path_buf()), None);
        assert!(matches!(run3.load_data(), Err(GldError::FingerprintMismatch { .. })));
    }
}
