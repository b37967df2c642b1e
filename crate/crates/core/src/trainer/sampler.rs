use std::collections::VecDeque;

use crate::data_io::{Dataset, FeatureSequence};
use crate::error::{Error, Result};
use crate::losses::ClassBatchGroup;
use crate::numeric::Rng;

/// Up to `max_segments` distinct segments, kept in temporal order.
pub fn sample_segments(
    seq: &FeatureSequence,
    max_segments: usize,
    rng: &mut Rng,
) -> Result<FeatureSequence> {
    if max_segments == 0 {
        return Err(Error::invalid("max_segments must be >= 1"));
    }
    if seq.n() <= max_segments {
        return Ok(seq.clone());
    }
    let mut idx = rng.sample_indices(seq.n(), max_segments);
    idx.sort_unstable();
    Ok(FeatureSequence {
        video_id: seq.video_id.clone(),
        fps: seq.fps,
        frames_per_segment: seq.frames_per_segment,
        features: seq.features.select_rows(&idx),
    })
}

/// Videos drawn for one step and the class groups over them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Dataset indices, each at most once.
    pub videos: Vec<usize>,
    /// Members index into `videos`.
    pub groups: Vec<ClassBatchGroup>,
}

/// Class-grouped sampler.
///
/// Each class keeps a shuffled queue of the videos containing it; a queue
/// is refilled with a fresh permutation once exhausted, so a video is not
/// drawn again for that class until all others have been.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    by_class: Vec<Vec<usize>>,
    queues: Vec<VecDeque<usize>>,
    classes_per_batch: usize,
    videos_per_class: usize,
}

impl BatchSampler {
    pub fn new(dataset: &Dataset, classes_per_batch: usize, videos_per_class: usize) -> Result<Self> {
        if classes_per_batch == 0 || videos_per_class == 0 {
            return Err(Error::Config("batch needs at least one class and one video per class".into()));
        }
        let mut by_class = vec![Vec::new(); dataset.num_classes()];
        for (i, v) in dataset.videos.iter().enumerate() {
            for c in v.labels.iter() {
                if c < by_class.len() {
                    by_class[c].push(i);
                }
            }
        }
        if by_class.iter().all(Vec::is_empty) {
            return Err(Error::Config("dataset has no labeled videos".into()));
        }
        Ok(Self {
            queues: vec![VecDeque::new(); by_class.len()],
            by_class,
            classes_per_batch,
            videos_per_class,
        })
    }

    /// Distinct classes drawn uniformly. Classes with at least two videos
    /// are preferred so every group can form pairs; singletons are used
    /// only when too few such classes exist.
    fn draw_classes(&self, rng: &mut Rng) -> Vec<usize> {
        let paired: Vec<usize> = (0..self.by_class.len())
            .filter(|&c| self.by_class[c].len() >= 2)
            .collect();
        let pool = if paired.len() >= self.classes_per_batch {
            paired
        } else {
            (0..self.by_class.len())
                .filter(|&c| !self.by_class[c].is_empty())
                .collect()
        };
        let take = self.classes_per_batch.min(pool.len());
        rng.sample_indices(pool.len(), take)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    }

    fn pop(&mut self, class: usize, rng: &mut Rng) -> usize {
        if self.queues[class].is_empty() {
            let mut order = self.by_class[class].clone();
            rng.shuffle(&mut order);
            self.queues[class].extend(order);
        }
        self.queues[class].pop_front().expect("class has videos")
    }

    pub fn next_batch(&mut self, rng: &mut Rng) -> Batch {
        let classes = self.draw_classes(rng);
        let mut videos: Vec<usize> = Vec::new();
        let mut groups = Vec::with_capacity(classes.len());
        for class in classes {
            let want = self.videos_per_class.min(self.by_class[class].len());
            let mut members: Vec<usize> = Vec::with_capacity(want);
            // a refill can hand back a video already in this group; bounded
            // retries keep the group distinct
            let mut guard = 0;
            while members.len() < want && guard < 4 * self.by_class[class].len() + want {
                guard += 1;
                let v = self.pop(class, rng);
                let pos = match videos.iter().position(|&x| x == v) {
                    Some(p) => p,
                    None => {
                        videos.push(v);
                        videos.len() - 1
                    }
                };
                if !members.contains(&pos) {
                    members.push(pos);
                }
            }
            groups.push(ClassBatchGroup { class, members });
        }
        Batch { videos, groups }
    }
}

/// One batch from a fresh sampler.
pub fn sample_batch(
    dataset: &Dataset,
    classes_per_batch: usize,
    videos_per_class: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    Ok(BatchSampler::new(dataset, classes_per_batch, videos_per_class)?.next_batch(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{LabeledVideo, VideoLabelSet};
    use crate::numeric::Matrix;

    fn video(id: &str, n: usize, labels: &[usize]) -> LabeledVideo {
        let data = (0..n * 2).map(|i| i as f32).collect();
        LabeledVideo {
            seq: FeatureSequence::new(id, Matrix::from_vec(n, 2, data).unwrap(), 25.0, 16).unwrap(),
            labels: labels.iter().copied().collect::<VideoLabelSet>(),
        }
    }

    fn dataset(per_class: &[usize]) -> Dataset {
        let mut videos = Vec::new();
        for (c, &k) in per_class.iter().enumerate() {
            for j in 0..k {
                videos.push(video(&format!("c{c}v{j}"), 4, &[c]));
            }
        }
        Dataset {
            classes: (0..per_class.len()).map(|c| format!("c{c}")).collect(),
            videos,
        }
    }

    #[test]
    fn segments_identity_and_subsample() {
        let v = video("a", 100, &[0]);
        assert_eq!(sample_segments(&v.seq, 300, &mut Rng::new(0)).unwrap(), v.seq);
        let long = video("b", 500, &[0]);
        let s = sample_segments(&long.seq, 300, &mut Rng::new(1)).unwrap();
        assert_eq!(s.n(), 300);
        let firsts: Vec<f32> = (0..300).map(|i| s.features[(i, 0)]).collect();
        assert!(firsts.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.fps, long.seq.fps);
        let again = sample_segments(&long.seq, 300, &mut Rng::new(1)).unwrap();
        assert_eq!(s, again);
        assert!(sample_segments(&long.seq, 0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn forced_composition_uses_whole_dataset() {
        let ds = dataset(&[5, 5, 5, 5]);
        let b = sample_batch(&ds, 4, 5, &mut Rng::new(3)).unwrap();
        let mut all = b.videos.clone();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(b.groups.len(), 4);
        for g in &b.groups {
            assert_eq!(g.members.len(), 5);
            for &m in &g.members {
                assert!(ds.videos[b.videos[m]].labels.contains(g.class));
            }
        }
    }

    #[test]
    fn small_class_degrades_to_available_count() {
        let ds = dataset(&[5, 3, 5, 5]);
        let b = sample_batch(&ds, 4, 5, &mut Rng::new(4)).unwrap();
        let g = b.groups.iter().find(|g| g.class == 1).unwrap();
        assert_eq!(g.members.len(), 3);
    }

    #[test]
    fn same_seed_same_batches() {
        let ds = dataset(&[6, 7, 5, 9, 4, 8]);
        let mut a = BatchSampler::new(&ds, 4, 5).unwrap();
        let mut b = BatchSampler::new(&ds, 4, 5).unwrap();
        let (mut ra, mut rb) = (Rng::new(9), Rng::new(9));
        for _ in 0..20 {
            assert_eq!(a.next_batch(&mut ra), b.next_batch(&mut rb));
        }
    }

    #[test]
    fn shared_videos_appear_once() {
        let mut ds = dataset(&[0, 0]);
        for j in 0..4 {
            ds.videos.push(video(&format!("both{j}"), 4, &[0, 1]));
        }
        let b = sample_batch(&ds, 2, 3, &mut Rng::new(5)).unwrap();
        let mut v = b.videos.clone();
        v.dedup();
        v.sort_unstable();
        v.dedup();
        assert_eq!(v.len(), b.videos.len());
        assert!(b.groups.iter().all(|g| g.members.len() == 3));
    }

    #[test]
    fn queues_cycle_through_every_video() {
        let ds = dataset(&[10]);
        let mut s = BatchSampler::new(&ds, 1, 5).unwrap();
        let mut rng = Rng::new(6);
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..2 {
            seen.extend(s.next_batch(&mut rng).videos);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn class_draws_are_uniform() {
        // 10 classes, 4 per batch: each class expected in 40% of batches
        let ds = dataset(&[5; 10]);
        let mut s = BatchSampler::new(&ds, 4, 5).unwrap();
        let mut rng = Rng::new(7);
        let batches = 5000;
        let mut counts = [0usize; 10];
        for _ in 0..batches {
            for g in s.next_batch(&mut rng).groups {
                counts[g.class] += 1;
            }
        }
        let expected = batches as f64 * 0.4;
        let chi2: f64 = counts
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // 9 degrees of freedom, 0.999 quantile
        assert!(chi2 < 27.88, "chi2 = {chi2}, counts = {counts:?}");
    }
}
