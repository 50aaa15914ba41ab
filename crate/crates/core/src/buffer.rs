//! FIFO reservoir of multi-view classes from which training episodes are drawn.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::Augmenter;
use crate::dsp::{MfccExtractor, MfccSequence};
use crate::error::{Error, Result};
use crate::rng;
use crate::source::{KeywordClass, SampleSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferConfig {
    pub m_buffer: usize,
    pub m_update: usize,
    pub k_shots: usize,
    pub n_way: usize,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self { m_buffer: 32768, m_update: 1, k_shots: 5, n_way: 512 }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_shots == 0 {
            return Err(Error::Config("k_shots must be at least 1".into()));
        }
        if self.n_way < 2 {
            return Err(Error::Config("n_way must be at least 2".into()));
        }
        if self.m_update > self.n_way || self.n_way > self.m_buffer {
            return Err(Error::Config(format!(
                "need m_update <= n_way <= m_buffer, got {} / {} / {}",
                self.m_update, self.n_way, self.m_buffer
            )));
        }
        Ok(())
    }

    pub fn views_per_class(&self) -> usize {
        self.k_shots + 1
    }
}

/// One class with its `K + 1` featurized views.
#[derive(Clone, Debug)]
pub struct BufferSlot {
    pub class: KeywordClass,
    pub views: Vec<MfccSequence>,
    /// Seed each view was rendered and augmented from.
    pub view_seeds: Vec<u64>,
    /// Position in the insertion sequence.
    pub serial: u64,
}

/// Turns fresh classes into buffer slots.
pub struct SlotFactory<'a> {
    pub source: &'a dyn SampleSource,
    pub augmenter: Option<&'a Augmenter>,
    pub extractor: &'a MfccExtractor,
}

impl SlotFactory<'_> {
    /// Render, augment and featurize one view from its own seed.
    pub fn view(&self, class: &KeywordClass, seed: u64) -> Result<MfccSequence> {
        let mut r = rng::item(seed);
        let wav = self.source.render(class, &mut r)?;
        let wav = match self.augmenter {
            Some(a) => a.augment(&wav, &mut r)?,
            None => wav,
        };
        self.extractor.featurize(&wav)
    }

    /// Draw `count` classes and their view seeds from `rng`, then render in parallel.
    ///
    /// All randomness is consumed sequentially, so the result does not depend
    /// on the number of worker threads.
    pub fn make(&self, count: usize, views: usize, first_serial: u64, rng: &mut dyn RngCore) -> Result<Vec<BufferSlot>> {
        let mut plan = Vec::with_capacity(count);
        for i in 0..count {
            let class = self.source.new_class(rng)?;
            let seeds: Vec<u64> = (0..views).map(|_| rng.next_u64()).collect();
            plan.push((first_serial + i as u64, class, seeds));
        }
        plan.into_par_iter()
            .map(|(serial, class, view_seeds)| {
                let views = view_seeds.iter().map(|&s| self.view(&class, s)).collect::<Result<Vec<_>>>()?;
                Ok(BufferSlot { class, views, view_seeds, serial })
            })
            .collect()
    }
}

/// Indices into the buffer plus a per-slot view order.
///
/// For slot `i`, `order[i][..K]` are the supports and `order[i][K]` the query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub slots: Vec<usize>,
    pub order: Vec<Vec<usize>>,
    pub k_shots: usize,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.slots.len()
    }

    /// Views in class-major order: each class's supports followed by its query.
    pub fn views<'b>(&self, buf: &'b EpisodeBuffer) -> Vec<&'b MfccSequence> {
        let mut out = Vec::with_capacity(self.slots.len() * (self.k_shots + 1));
        for (&s, ord) in self.slots.iter().zip(&self.order) {
            let slot = &buf.slots[s];
            out.extend(ord.iter().map(|&v| &slot.views[v]));
        }
        out
    }

    pub fn class_ids(&self, buf: &EpisodeBuffer) -> Vec<u64> {
        self.slots.iter().map(|&s| buf.slots[s].class.class_id).collect()
    }
}

pub struct EpisodeBuffer {
    cfg: BufferConfig,
    slots: VecDeque<BufferSlot>,
    next_serial: u64,
}

impl EpisodeBuffer {
    pub fn init(factory: &SlotFactory<'_>, cfg: &BufferConfig, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let slots = factory.make(cfg.m_buffer, cfg.views_per_class(), 0, rng)?;
        Ok(Self { cfg: cfg.clone(), slots: slots.into(), next_serial: cfg.m_buffer as u64 })
    }

    /// Build a buffer from already generated slots.
    pub fn from_slots(cfg: &BufferConfig, slots: Vec<BufferSlot>) -> Result<Self> {
        cfg.validate()?;
        if slots.len() != cfg.m_buffer {
            return Err(Error::Config(format!("{} slots for m_buffer {}", slots.len(), cfg.m_buffer)));
        }
        if let Some(s) = slots.iter().find(|s| s.views.len() != cfg.views_per_class()) {
            return Err(Error::Shape(format!("slot {} has {} views, expected {}", s.serial, s.views.len(), cfg.views_per_class())));
        }
        let next_serial = slots.iter().map(|s| s.serial + 1).max().unwrap_or(0);
        Ok(Self { cfg: cfg.clone(), slots: slots.into(), next_serial })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> impl Iterator<Item = &BufferSlot> {
        self.slots.iter()
    }

    pub fn slot(&self, i: usize) -> Option<&BufferSlot> {
        self.slots.get(i)
    }

    pub fn view_count(&self) -> usize {
        self.slots.iter().map(|s| s.views.len()).sum()
    }

    pub fn sample_episode(&self, rng: &mut dyn RngCore) -> Result<Episode> {
        let n = self.cfg.n_way;
        if n > self.slots.len() {
            return Err(Error::Config(format!("n_way {n} exceeds buffer size {}", self.slots.len())));
        }
        let slots = index::sample(rng, self.slots.len(), n).into_vec();
        let order = slots
            .iter()
            .map(|_| {
                let mut o: Vec<usize> = (0..self.cfg.views_per_class()).collect();
                o.shuffle(rng);
                o
            })
            .collect();
        Ok(Episode { slots, order, k_shots: self.cfg.k_shots })
    }

    /// Drop the `m_update` oldest slots and append as many fresh ones.
    pub fn refresh(&mut self, factory: &SlotFactory<'_>, rng: &mut dyn RngCore) -> Result<()> {
        let m = self.cfg.m_update;
        if m == 0 {
            return Ok(());
        }
        let fresh = factory.make(m, self.cfg.views_per_class(), self.next_serial, rng)?;
        self.push(fresh);
        Ok(())
    }

    /// FIFO insertion of pre-built slots; the buffer size is unchanged.
    pub fn push(&mut self, fresh: Vec<BufferSlot>) {
        for slot in fresh {
            self.slots.pop_front();
            self.next_serial = self.next_serial.max(slot.serial + 1);
            self.slots.push_back(slot);
        }
    }

    /// One line per slot: `serial<TAB>class_id<TAB>label<TAB>seed,seed,...`.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for s in &self.slots {
            let seeds: Vec<String> = s.view_seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{}\t{}\t{}\t{}", s.serial, s.class.class_id, s.class.label(), seeds.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::ClassSpec;
    use ndarray::Array2;

    fn slot(serial: u64, views: usize) -> BufferSlot {
        let seq = MfccSequence::new(Array2::from_elem((8, 2), serial as f32), 0.025, 0.01).unwrap();
        BufferSlot {
            class: KeywordClass { class_id: serial, spec: ClassSpec::Keyword(format!("c{serial}")) },
            views: vec![seq; views],
            view_seeds: (0..views as u64).collect(),
            serial,
        }
    }

    fn buffer(m: usize, n: usize, k: usize, upd: usize) -> EpisodeBuffer {
        let cfg = BufferConfig { m_buffer: m, m_update: upd, k_shots: k, n_way: n };
        EpisodeBuffer::from_slots(&cfg, (0..m as u64).map(|i| slot(i, k + 1)).collect()).unwrap()
    }

    #[test]
    fn config_bounds() {
        assert!(BufferConfig::default().validate().is_ok());
        assert_eq!(BufferConfig::default().m_buffer * BufferConfig::default().views_per_class(), 196_608);
        let bad = BufferConfig { m_buffer: 4, n_way: 5, ..BufferConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BufferConfig { m_update: 3, n_way: 2, m_buffer: 4, k_shots: 1 };
        assert!(bad.validate().is_err());
        let bad = BufferConfig { k_shots: 0, m_buffer: 4, n_way: 2, m_update: 1 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn exhaustive_episode_covers_every_slot() {
        let b = buffer(5, 5, 2, 1);
        let mut r = rng::item(1);
        let ep = b.sample_episode(&mut r).unwrap();
        let mut s = ep.slots.clone();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
        for o in &ep.order {
            let mut o = o.clone();
            o.sort();
            assert_eq!(o, vec![0, 1, 2]);
        }
        assert_eq!(ep.views(&b).len(), 15);
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        let b = buffer(8, 2, 1, 1);
        let mut r = rng::item(2);
        let mut hits = [0usize; 8];
        for _ in 0..10_000 {
            let ep = b.sample_episode(&mut r).unwrap();
            let ids = ep.class_ids(&b);
            assert_ne!(ids[0], ids[1]);
            for s in ep.slots {
                hits[s] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / 10_000.0;
            assert!((0.23..=0.27).contains(&f), "{f}");
        }
    }

    #[test]
    fn query_position_is_uniform() {
        let b = buffer(2, 2, 2, 1);
        let mut r = rng::item(3);
        let mut q = [0usize; 3];
        for _ in 0..6000 {
            let ep = b.sample_episode(&mut r).unwrap();
            q[ep.order[0][2]] += 1;
        }
        assert!(q.iter().all(|&c| (1800..=2200).contains(&c)), "{q:?}");
    }

    #[test]
    fn fifo_refresh_order() {
        let mut b = buffer(4, 2, 1, 1);
        b.push(vec![slot(4, 2)]);
        let serials: Vec<u64> = b.slots().map(|s| s.serial).collect();
        assert_eq!(serials, vec![1, 2, 3, 4]);
        assert_eq!(b.len(), 4);
    }

    #[test]
    fn sampling_does_not_mutate() {
        let b = buffer(6, 3, 1, 1);
        let before = b.manifest();
        let mut r = rng::item(4);
        for _ in 0..50 {
            b.sample_episode(&mut r).unwrap();
        }
        assert_eq!(b.manifest(), before);
        assert_eq!(before.lines().next().unwrap(), "0\t0\tc0\t0,1");
    }

    #[test]
    fn too_many_ways() {
        let cfg = BufferConfig { m_buffer: 2, m_update: 1, k_shots: 1, n_way: 2 };
        let mut b = EpisodeBuffer::from_slots(&cfg, vec![slot(0, 2), slot(1, 2)]).unwrap();
        b.cfg.n_way = 3;
        assert!(b.sample_episode(&mut rng::item(5)).is_err());
    }
}
