//! Synthetic datasets with planted activity intervals.
//!
//! Background segments are drawn from `N(0, σ²I)`; segments inside a planted
//! interval of class `c` from `N(μ_c, σ²I)`, where the class means are
//! mutually orthogonal with `‖μ_c‖ = separation`. The exact intervals are
//! kept as ground truth for evaluation; training only ever sees the label
//! sets.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data_io::{
    write_features, Dataset, DatasetManifest, FeatureSequence, LabeledVideo, ManifestEntry,
    VideoLabelSet, DEFAULT_FPS, DEFAULT_FRAMES_PER_SEGMENT,
};
use crate::error::{Error, Result};
use crate::evaluation::{write_ground_truth, GroundTruthSegment};
use crate::numeric::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub train_videos_per_class: usize,
    pub test_videos_per_class: usize,
    /// Mean segment count per video.
    pub segments_per_video: usize,
    /// Video lengths are drawn uniformly from
    /// `segments_per_video · [1 − spread, 1 + spread]`; zero fixes them.
    pub length_spread: f64,
    /// Mean planted interval length, in segments.
    pub mean_activity_len: f64,
    /// Each video gets between 1 and this many intervals of its main class.
    pub max_instances: usize,
    /// Probability that a video also contains one interval of another class.
    pub second_class_prob: f64,
    /// `‖μ_c‖`.
    pub separation: f64,
    pub noise_std: f64,
    pub fps: f64,
    pub frames_per_segment: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            dim: 32,
            train_videos_per_class: 5,
            test_videos_per_class: 5,
            segments_per_video: 120,
            length_spread: 0.0,
            mean_activity_len: 12.0,
            max_instances: 3,
            second_class_prob: 0.0,
            separation: 8.0,
            noise_std: 0.25,
            fps: DEFAULT_FPS,
            frames_per_segment: DEFAULT_FRAMES_PER_SEGMENT,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.dim == 0 {
            return bad("synthetic data needs at least one class and one dimension".into());
        }
        if self.num_classes > self.dim {
            return bad(format!(
                "{} classes cannot have orthogonal means in {} dimensions",
                self.num_classes, self.dim
            ));
        }
        if !(self.separation > 0.0) {
            return bad(format!("separation must be > 0, got {}", self.separation));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise std must be >= 0, got {}", self.noise_std));
        }
        if self.segments_per_video == 0 || self.max_instances == 0 {
            return bad("segments per video and max instances must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.length_spread) {
            return bad(format!("length spread must lie in [0, 1), got {}", self.length_spread));
        }
        if !(self.mean_activity_len >= 1.0)
            || self.mean_activity_len * 1.5 > self.length_range().0 as f64
        {
            return bad(format!(
                "mean activity length {} does not fit in {} segments",
                self.mean_activity_len,
                self.length_range().0
            ));
        }
        if !(0.0..=1.0).contains(&self.second_class_prob) {
            return bad("second class probability must lie in [0, 1]".into());
        }
        if !(self.fps > 0.0) || self.frames_per_segment == 0 {
            return bad("timing must be positive".into());
        }
        Ok(())
    }

    /// Shortest and longest possible video, in segments.
    pub fn length_range(&self) -> (usize, usize) {
        let n = self.segments_per_video as f64;
        let lo = (n * (1.0 - self.length_spread)).ceil().max(1.0) as usize;
        let hi = ((n * (1.0 + self.length_spread)).floor() as usize).max(lo);
        (lo, hi)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("class_{c:02}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub seq: FeatureSequence,
    pub labels: VideoLabelSet,
    pub ground_truth: Vec<GroundTruthSegment>,
    /// Planted intervals as inclusive segment ranges, with class index.
    pub intervals: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub classes: Vec<String>,
    pub means: Vec<Vec<f64>>,
    pub train: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

fn to_dataset(classes: &[String], videos: &[SyntheticVideo]) -> Dataset {
    Dataset {
        classes: classes.to_vec(),
        videos: videos
            .iter()
            .map(|v| LabeledVideo {
                seq: v.seq.clone(),
                labels: v.labels.clone(),
            })
            .collect(),
    }
}

impl SyntheticDataset {
    pub fn train_dataset(&self) -> Dataset {
        to_dataset(&self.classes, &self.train)
    }

    pub fn test_dataset(&self) -> Dataset {
        to_dataset(&self.classes, &self.test)
    }

    pub fn test_ground_truth(&self) -> Vec<GroundTruthSegment> {
        self.test
            .iter()
            .flat_map(|v| v.ground_truth.iter().cloned())
            .collect()
    }

    pub fn train_ground_truth(&self) -> Vec<GroundTruthSegment> {
        self.train
            .iter()
            .flat_map(|v| v.ground_truth.iter().cloned())
            .collect()
    }

    /// Writes `features/*.feat`, `{train,test}.tsv` manifests and
    /// `{train,test}_gt.tsv` ground truth under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let mut written = Vec::new();
        for (split, videos) in [("train", &self.train), ("test", &self.test)] {
            let mut manifest = DatasetManifest {
                classes: self.classes.clone(),
                split: Some(split.to_string()),
                feature_dim: Some(self.means.first().map_or(0, Vec::len)),
                base_dir: dir.to_path_buf(),
                entries: Vec::new(),
            };
            for v in videos.iter() {
                let rel = PathBuf::from("features").join(format!("{}.feat", v.seq.video_id));
                write_features(&v.seq, &dir.join(&rel))?;
                manifest.entries.push(ManifestEntry {
                    video_id: v.seq.video_id.clone(),
                    path: rel,
                    labels: v.labels.iter().map(|c| self.classes[c].clone()).collect(),
                });
            }
            let mpath = dir.join(format!("{split}.tsv"));
            manifest.write(&mpath)?;
            let gt: Vec<GroundTruthSegment> = videos
                .iter()
                .flat_map(|v| v.ground_truth.iter().cloned())
                .collect();
            let gpath = dir.join(format!("{split}_gt.tsv"));
            write_ground_truth(&gpath, &gt)?;
            written.push(mpath);
            written.push(gpath);
        }
        Ok(written)
    }
}

/// Generates a train and a test split sharing the same class means.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let means = class_means(cfg, &mut root.substream(0));
    let classes = cfg.class_names();
    let split = |name: &str, per_class: usize, tag: u64| {
        let mut rng = root.substream(tag);
        generate_split(cfg, &means, &classes, name, per_class, &mut rng)
    };
    let train = split("train", cfg.train_videos_per_class, 1);
    let test = split("test", cfg.test_videos_per_class, 2);
    Ok(SyntheticDataset {
        classes,
        means,
        train,
        test,
    })
}

fn class_means(cfg: &SynthConfig, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    while basis.len() < cfg.num_classes {
        let mut v: Vec<f64> = (0..cfg.dim).map(|_| rng.normal()).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * cfg.separation).collect())
        .collect()
}

fn generate_split(
    cfg: &SynthConfig,
    means: &[Vec<f64>],
    classes: &[String],
    split: &str,
    per_class: usize,
    rng: &mut Rng,
) -> Vec<SyntheticVideo> {
    let total = per_class * cfg.num_classes;
    (0..total)
        .map(|idx| {
            let main = idx / per_class;
            let video_id = format!("{split}_{idx:04}");
            generate_video(cfg, means, classes, video_id, main, rng)
        })
        .collect()
}

fn draw_length(cfg: &SynthConfig, rng: &mut Rng) -> usize {
    let lo = (cfg.mean_activity_len * 0.5).ceil().max(1.0) as usize;
    let hi = ((cfg.mean_activity_len * 1.5).floor() as usize).max(lo);
    // symmetric around the mean when lo + hi = 2·mean
    lo + rng.below(hi - lo + 1)
}

fn generate_video(
    cfg: &SynthConfig,
    means: &[Vec<f64>],
    classes: &[String],
    video_id: String,
    main_class: usize,
    rng: &mut Rng,
) -> SyntheticVideo {
    let (lo, hi) = cfg.length_range();
    let n = if lo == hi { lo } else { lo + rng.below(hi - lo + 1) };
    let mut wanted = vec![main_class; 1 + rng.below(cfg.max_instances)];
    if cfg.num_classes > 1 && rng.uniform() < cfg.second_class_prob {
        let other = (main_class + 1 + rng.below(cfg.num_classes - 1)) % cfg.num_classes;
        wanted.push(other);
    }
    // label of each segment, None = background
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut intervals = Vec::new();
    for class in wanted {
        let len = draw_length(cfg, rng).min(n);
        for _ in 0..100 {
            let start = rng.below(n - len + 1);
            let end = start + len - 1;
            // keep a background gap so intervals never touch
            let lo = start.saturating_sub(1);
            let hi = (end + 1).min(n - 1);
            if owner[lo..=hi].iter().all(Option::is_none) {
                owner[start..=end].iter_mut().for_each(|o| *o = Some(class));
                intervals.push((start, end, class));
                break;
            }
        }
    }
    intervals.sort_unstable();

    let mut data = Vec::with_capacity(n * cfg.dim);
    for o in &owner {
        for j in 0..cfg.dim {
            let mu = o.map_or(0.0, |c| means[c][j]);
            data.push((mu + cfg.noise_std * rng.normal()) as f32);
        }
    }
    let seq = FeatureSequence {
        video_id: video_id.clone(),
        fps: cfg.fps,
        frames_per_segment: cfg.frames_per_segment,
        features: Matrix::from_vec(n, cfg.dim, data).expect("sized above"),
    };
    let seg = f64::from(cfg.frames_per_segment) / cfg.fps;
    let ground_truth = intervals
        .iter()
        .map(|&(s, e, c)| GroundTruthSegment {
            video_id: video_id.clone(),
            class: classes[c].clone(),
            start_s: s as f64 * seg,
            end_s: (e + 1) as f64 * seg,
        })
        .collect();
    SyntheticVideo {
        labels: intervals.iter().map(|&(_, _, c)| c).collect(),
        seq,
        ground_truth,
        intervals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_gives_exact_means() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for v in &ds.train {
            for &(s, e, c) in &v.intervals {
                for i in s..=e {
                    for (j, &x) in v.seq.features.row(i).iter().enumerate() {
                        assert_eq!(x, ds.means[c][j] as f32);
                    }
                }
            }
        }
        for m in &ds.means {
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - cfg.separation).abs() < 1e-9);
        }
        for a in 0..ds.means.len() {
            for b in 0..a {
                let dot: f64 = ds.means[a].iter().zip(&ds.means[b]).map(|(x, y)| x * y).sum();
                assert!(dot.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        for (x, y) in a.train.iter().chain(&a.test).zip(b.train.iter().chain(&b.test)) {
            assert_eq!(x.seq, y.seq);
            assert_eq!(x.ground_truth, y.ground_truth);
        }
        let c = generate_synthetic(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.train[0].seq, c.train[0].seq);
    }

    #[test]
    fn labels_match_planted_intervals() {
        let cfg = SynthConfig {
            second_class_prob: 0.5,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for v in ds.train.iter().chain(&ds.test) {
            let planted: VideoLabelSet = v.intervals.iter().map(|&(_, _, c)| c).collect();
            assert_eq!(planted, v.labels);
            assert!(!v.labels.is_empty());
            assert_eq!(v.ground_truth.len(), v.intervals.len());
            for w in v.intervals.windows(2) {
                assert!(w[0].1 + 1 < w[1].0, "intervals must not touch");
            }
        }
    }

    #[test]
    fn foreground_fraction_tracks_config() {
        let cfg = SynthConfig {
            train_videos_per_class: 40,
            test_videos_per_class: 0,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let fg: usize = ds
            .train
            .iter()
            .flat_map(|v| v.intervals.iter().map(|&(s, e, _)| e - s + 1))
            .sum();
        let observed = fg as f64 / (ds.train.len() * cfg.segments_per_video) as f64;
        let mean_instances = (1 + cfg.max_instances) as f64 / 2.0;
        let expected = cfg.mean_activity_len * mean_instances / cfg.segments_per_video as f64;
        assert!(
            (observed - expected).abs() / expected < 0.15,
            "observed {observed}, expected {expected}"
        );
    }

    #[test]
    fn too_many_classes_rejected() {
        let cfg = SynthConfig {
            num_classes: 40,
            dim: 32,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn writes_loadable_tree() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            dim: 8,
            segments_per_video: 40,
            mean_activity_len: 6.0,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        ds.write(dir.path()).unwrap();
        let m = crate::data_io::read_manifest(&dir.path().join("test.tsv")).unwrap();
        let loaded = m.load().unwrap();
        assert_eq!(loaded.videos.len(), 25);
        for (a, b) in loaded.videos.iter().zip(&ds.test) {
            assert_eq!(a.seq, b.seq);
            assert_eq!(a.labels, b.labels);
        }
        let gt = crate::evaluation::read_ground_truth(&dir.path().join("test_gt.tsv")).unwrap();
        assert_eq!(gt.len(), ds.test_ground_truth().len());
    }
}
