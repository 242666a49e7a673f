//! Synthetic three-modality phantom subjects.
//!
//! Each subject derives from one smooth "anatomy" field (a sum of seeded
//! Gaussian blobs, normalized to [0, 1]):
//!
//! * modality A is the anatomy itself,
//! * modality B is a monotone remap minus a hypometabolism lesion whose
//!   depth scales with cognitive severity (AD/MCI only),
//! * modality C is a different remap plus an amyloid blob scaling with
//!   CDR-SOB (AD only).
//!
//! The lesion sits at the anatomy's center of mass and the amyloid blob at
//! a fixed offset from it, so both are predictable from any one modality —
//! that is what makes the conditioning signal learnable and testable.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::parallel;
use crate::rng::{derive, derive2, rng_from};
use crate::volume::{read_volume, write_volume, Volume};
use crate::{Error, Result};

pub const DEFAULT_SHAPE: (usize, usize, usize) = (32, 32, 32);
/// Mask threshold on the normalized anatomy field.
pub const MASK_THRESHOLD: f32 = 0.05;
/// Peak lesion depth (modality B) at maximal severity.
pub const LESION_SCALE: f32 = 1.2;
/// Peak amyloid gain (modality C) at maximal CDR-SOB.
pub const AMYLOID_SCALE: f32 = 1.0;
/// Lesion voxels are those with blob weight above this level.
pub const LESION_REGION_LEVEL: f32 = 0.5;

const ANATOMY_BLOBS: usize = 5;
const LANE_ANATOMY: u64 = 1;
const LANE_SCORES: u64 = 2;

/// Exact ADNI class proportions (198 AD / 495 MCI / 335 HC of 1028).
pub const ADNI_MIX: [f64; 3] = [198.0 / 1028.0, 495.0 / 1028.0, 335.0 / 1028.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
    C,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::A, Modality::B, Modality::C];

    pub fn index(self) -> usize {
        match self {
            Modality::A => 0,
            Modality::B => 1,
            Modality::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Modality::ALL.get(i).copied()
    }

    /// Clinical display name used in prompts.
    pub fn display_name(self) -> &'static str {
        match self {
            Modality::A => "sMRI",
            Modality::B => "FDG-PET",
            Modality::C => "AV45-PET",
        }
    }

    pub fn from_display_name(s: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.display_name() == s)
    }

    pub fn code(self) -> &'static str {
        match self {
            Modality::A => "A",
            Modality::B => "B",
            Modality::C => "C",
        }
    }

    pub fn from_code(s: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.code() == s)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    HC,
    MCI,
    AD,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::HC, Diagnosis::MCI, Diagnosis::AD];

    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::HC => "HC",
            Diagnosis::MCI => "MCI",
            Diagnosis::AD => "AD",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<Diagnosis> {
        Diagnosis::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub diagnosis: Diagnosis,
    pub mmse: f32,
    pub adas13: f32,
    pub cdr_sob: f32,
}

impl ClinicalRecord {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mmse.is_finite()
            && self.adas13.is_finite()
            && self.cdr_sob.is_finite()
            && (0.0..=30.0).contains(&self.mmse)
            && (0.0..=85.0).contains(&self.adas13)
            && (0.0..=18.0).contains(&self.cdr_sob);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("clinical record out of range: {self:?}")))
        }
    }

    /// Healthy-control reference record.
    pub fn healthy() -> Self {
        ClinicalRecord { diagnosis: Diagnosis::HC, mmse: 30.0, adas13: 0.0, cdr_sob: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub volumes: [Option<Volume>; 3],
    pub mask: Volume,
    pub clinical: ClinicalRecord,
}

impl Subject {
    pub fn volume(&self, m: Modality) -> Option<&Volume> {
        self.volumes[m.index()].as_ref()
    }

    pub fn present_modalities(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|m| self.volumes[m.index()].is_some()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.volumes.iter().all(Option::is_some)
    }

    pub fn validate(&self) -> Result<()> {
        self.clinical.validate()?;
        let shape = self.mask.shape();
        let mut present = 0;
        for (i, v) in self.volumes.iter().enumerate() {
            if let Some(v) = v {
                present += 1;
                if v.shape() != shape {
                    return Err(Error::shape(
                        "Subject::validate",
                        format!("modality {i} shape {:?} vs mask {:?}", v.shape(), shape),
                    ));
                }
                if !v.is_finite() || v.voxels().iter().any(|&x| !(-1.0..=1.0).contains(&x)) {
                    return Err(Error::config(format!(
                        "subject {}: modality {i} outside [-1, 1]",
                        self.id
                    )));
                }
            }
        }
        if present == 0 {
            return Err(Error::config(format!("subject {} has no modalities", self.id)));
        }
        if self.mask.voxels().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::config(format!("subject {}: mask is not binary", self.id)));
        }
        Ok(())
    }
}

// ---- anatomy and modality synthesis ----

struct Blob {
    center: [f32; 3],
    sigma: f32,
    amplitude: f32,
}

fn eval_blobs(shape: (usize, usize, usize), blobs: &[Blob]) -> Volume {
    Volume::from_fn(shape, |z, y, x| {
        let p = [z as f32, y as f32, x as f32];
        blobs
            .iter()
            .map(|b| {
                let r2: f32 = p
                    .iter()
                    .zip(&b.center)
                    .map(|(pi, ci)| (pi - ci) * (pi - ci))
                    .sum();
                b.amplitude * (-r2 / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum()
    })
}

/// Normalized [0, 1] anatomy field for a subject seed.
pub fn anatomy_field(seed: u64, shape: (usize, usize, usize)) -> Volume {
    let mut rng = rng_from(derive(seed, LANE_ANATOMY));
    let (d, h, w) = shape;
    let min_extent = d.min(h).min(w) as f32;
    let blobs: Vec<Blob> = (0..ANATOMY_BLOBS)
        .map(|_| Blob {
            center: [
                rng.gen_range(0.25..0.75) * d as f32,
                rng.gen_range(0.25..0.75) * h as f32,
                rng.gen_range(0.25..0.75) * w as f32,
            ],
            sigma: rng.gen_range(0.10..0.22) * min_extent,
            amplitude: rng.gen_range(0.5..1.0),
        })
        .collect();
    let mut anatomy = eval_blobs(shape, &blobs);
    let max = anatomy.voxels().iter().cloned().fold(f32::MIN, f32::max);
    for v in anatomy.voxels_mut() {
        *v /= max;
    }
    anatomy
}

fn center_of_mass(anatomy01: &Volume) -> [f32; 3] {
    let (d, h, w) = anatomy01.shape();
    let mut acc = [0.0f64; 3];
    let mut total = 0.0f64;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = anatomy01.at(z, y, x) as f64;
                acc[0] += v * z as f64;
                acc[1] += v * y as f64;
                acc[2] += v * x as f64;
                total += v;
            }
        }
    }
    [
        (acc[0] / total) as f32,
        (acc[1] / total) as f32,
        (acc[2] / total) as f32,
    ]
}

/// Unit-peak lesion weight field: a Gaussian at the anatomy's center of
/// mass. Pure in the anatomy, so it is recoverable from modality A alone.
pub fn lesion_field(anatomy01: &Volume) -> Volume {
    let shape = anatomy01.shape();
    let min_extent = shape.0.min(shape.1).min(shape.2) as f32;
    let blobs = [Blob { center: center_of_mass(anatomy01), sigma: 0.15 * min_extent, amplitude: 1.0 }];
    eval_blobs(shape, &blobs)
}

/// Unit-peak amyloid weight field: offset from the center of mass along y.
pub fn amyloid_field(anatomy01: &Volume) -> Volume {
    let shape = anatomy01.shape();
    let min_extent = shape.0.min(shape.1).min(shape.2) as f32;
    let mut center = center_of_mass(anatomy01);
    center[1] += 0.12 * shape.1 as f32;
    let blobs = [Blob { center, sigma: 0.13 * min_extent, amplitude: 1.0 }];
    eval_blobs(shape, &blobs)
}

/// Boolean lesion-region mask (weight above [`LESION_REGION_LEVEL`]).
pub fn lesion_region(anatomy01: &Volume) -> Vec<bool> {
    lesion_field(anatomy01).voxels().iter().map(|&v| v > LESION_REGION_LEVEL).collect()
}

/// Normalized anatomy recovered from a stored modality-A volume.
pub fn anatomy_from_modality_a(a: &Volume) -> Volume {
    a.map(|v| (v + 1.0) * 0.5)
}

fn remap_b(a: f32) -> f32 {
    a.max(0.0).powf(0.7)
}

fn remap_c(a: f32) -> f32 {
    a.max(0.0).powf(1.5)
}

/// Lesion depth for a clinical record: zero for HC, severity-scaled for
/// AD/MCI.
pub fn lesion_depth(clinical: &ClinicalRecord) -> f32 {
    match clinical.diagnosis {
        Diagnosis::HC => 0.0,
        Diagnosis::MCI | Diagnosis::AD => LESION_SCALE * (30.0 - clinical.mmse) / 30.0,
    }
}

fn amyloid_gain(clinical: &ClinicalRecord) -> f32 {
    match clinical.diagnosis {
        Diagnosis::AD => AMYLOID_SCALE * clinical.cdr_sob / 18.0,
        _ => 0.0,
    }
}

pub fn generate_subject(
    seed: u64,
    shape: (usize, usize, usize),
    disease_profile: ClinicalRecord,
) -> Result<Subject> {
    let (d, h, w) = shape;
    if d < 8 || h < 8 || w < 8 {
        return Err(Error::config(format!("phantom shape {shape:?} must be at least 8 per axis")));
    }
    disease_profile.validate()?;

    let anatomy = anatomy_field(seed, shape);
    let mask = anatomy.map(|v| if v > MASK_THRESHOLD { 1.0 } else { 0.0 });
    let lesion = lesion_field(&anatomy);
    let amyloid = amyloid_field(&anatomy);
    let depth = lesion_depth(&disease_profile);
    let gain = amyloid_gain(&disease_profile);

    let mut vol_a = anatomy.map(|v| 2.0 * v - 1.0);
    let mut vol_b = Volume::zeros(shape);
    let mut vol_c = Volume::zeros(shape);
    for i in 0..anatomy.numel() {
        let a = anatomy.voxels()[i];
        vol_b.voxels_mut()[i] = 2.0 * remap_b(a) - 1.0 - depth * lesion.voxels()[i];
        vol_c.voxels_mut()[i] = 2.0 * remap_c(a) - 1.0 + gain * amyloid.voxels()[i];
    }
    vol_a.clamp_in_place(-1.0, 1.0);
    vol_b.clamp_in_place(-1.0, 1.0);
    vol_c.clamp_in_place(-1.0, 1.0);

    let subject = Subject {
        id: format!("s{seed:08x}"),
        volumes: [Some(vol_a), Some(vol_b), Some(vol_c)],
        mask,
        clinical: disease_profile,
    };
    subject.validate()?;
    Ok(subject)
}

/// Class-conditional clinical record. ADAS13 is anti-monotone and CDR-SOB
/// co-monotone with (30 - MMSE), plus clipped noise.
pub fn sample_clinical(diagnosis: Diagnosis, rng: &mut impl Rng) -> ClinicalRecord {
    let mmse: f32 = match diagnosis {
        Diagnosis::HC => rng.gen_range(28.0..=30.0),
        Diagnosis::MCI => rng.gen_range(24.0..28.0),
        Diagnosis::AD => rng.gen_range(18.0..24.0),
    };
    let sev = 30.0 - mmse;
    let noise_a: f32 = rng.gen_range(-1.5..1.5);
    let noise_c: f32 = rng.gen_range(-0.4..0.4);
    ClinicalRecord {
        diagnosis,
        mmse,
        adas13: (3.5 * sev + noise_a).clamp(0.0, 85.0),
        cdr_sob: (0.5625 * sev + noise_c).clamp(0.0, 18.0),
    }
}

/// Largest-remainder apportionment of `n` into `quotas` (exact fractions).
/// Ties go to the larger fractional part, then lower index.
pub fn apportion(n: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..n.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Generate `n` subjects with per-class counts from largest-remainder
/// apportionment of `class_mix` = (AD, MCI, HC). Parallel per subject with
/// derived seeds; serial and parallel runs agree bit-for-bit.
pub fn compose_cohort(
    n: usize,
    seed: u64,
    shape: (usize, usize, usize),
    class_mix: [f64; 3],
) -> Result<Vec<Subject>> {
    if n < 10 {
        return Err(Error::config(format!("cohort size {n} must be at least 10")));
    }
    let total: f64 = class_mix.iter().sum();
    if (total - 1.0).abs() > 1e-6 || class_mix.iter().any(|&p| p < 0.0) {
        return Err(Error::config(format!("class mix {class_mix:?} must sum to 1")));
    }
    let counts = apportion(n, &class_mix);
    let mut diagnoses = Vec::with_capacity(n);
    for (c, &count) in counts.iter().enumerate() {
        let dx = [Diagnosis::AD, Diagnosis::MCI, Diagnosis::HC][c];
        diagnoses.extend(std::iter::repeat(dx).take(count));
    }

    let subjects: Vec<Result<Subject>> = parallel::run_indexed(n, |i| {
        let mut score_rng = rng_from(derive2(seed, i as u64, LANE_SCORES));
        let clinical = sample_clinical(diagnoses[i], &mut score_rng);
        let mut subject = generate_subject(derive(seed, i as u64), shape, clinical)?;
        subject.id = format!("s{i:04}");
        Ok(subject)
    });
    subjects.into_iter().collect()
}

// ---- splits ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    GenTrain,
    GenVal,
    GenTest,
    ClfTrain,
    ClfVal,
    ClfTest,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::GenTrain,
        Split::GenVal,
        Split::GenTest,
        Split::ClfTrain,
        Split::ClfVal,
        Split::ClfTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::GenTrain => "gen_train",
            Split::GenVal => "gen_val",
            Split::GenTest => "gen_test",
            Split::ClfTrain => "clf_train",
            Split::ClfVal => "clf_val",
            Split::ClfTest => "clf_test",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

/// Disjoint, exhaustive index partition of a cohort.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub gen_train: Vec<usize>,
    pub gen_val: Vec<usize>,
    pub gen_test: Vec<usize>,
    pub clf_train: Vec<usize>,
    pub clf_val: Vec<usize>,
    pub clf_test: Vec<usize>,
}

impl Splits {
    pub fn bucket(&self, s: Split) -> &[usize] {
        match s {
            Split::GenTrain => &self.gen_train,
            Split::GenVal => &self.gen_val,
            Split::GenTest => &self.gen_test,
            Split::ClfTrain => &self.clf_train,
            Split::ClfVal => &self.clf_val,
            Split::ClfTest => &self.clf_test,
        }
    }

    fn bucket_mut(&mut self, s: Split) -> &mut Vec<usize> {
        match s {
            Split::GenTrain => &mut self.gen_train,
            Split::GenVal => &mut self.gen_val,
            Split::GenTest => &mut self.gen_test,
            Split::ClfTrain => &mut self.clf_train,
            Split::ClfVal => &mut self.clf_val,
            Split::ClfTest => &mut self.clf_test,
        }
    }

    pub fn split_of(&self, idx: usize) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.bucket(s).contains(&idx))
    }

    pub fn total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.bucket(s).len()).sum()
    }
}

fn round_half_up(x: f64) -> usize {
    x.round() as usize
}

/// Bucket sizes mirroring the 1028-subject protocol: a generator pool of
/// ~600/1028 with 10%/10% val/test inside, and a classification pool split
/// ~300/128 with 10% of the training part held as validation.
pub fn split_targets(n: usize) -> [usize; 6] {
    let gen_pool = round_half_up(n as f64 * 600.0 / 1028.0);
    let clf_pool = n - gen_pool;
    let gen_val = round_half_up(gen_pool as f64 * 0.1);
    let gen_test = round_half_up(gen_pool as f64 * 0.1);
    let gen_train = gen_pool - gen_val - gen_test;
    let clf_test = round_half_up(clf_pool as f64 * 128.0 / 428.0);
    let clf_train_pool = clf_pool - clf_test;
    let clf_val = round_half_up(clf_train_pool as f64 * 0.1);
    let clf_train = clf_train_pool - clf_val;
    [gen_train, gen_val, gen_test, clf_train, clf_val, clf_test]
}

/// Diagnosis-stratified split with exact bucket totals (2-D largest
/// remainder over the bucket x class table).
pub fn split_cohort(cohort: &[Subject], seed: u64) -> Result<Splits> {
    let n = cohort.len();
    if n < 20 {
        return Err(Error::config(format!("cohort size {n} too small to split (need >= 20)")));
    }
    let targets = split_targets(n);

    // Subjects per class, shuffled within class.
    let mut by_class: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
    for (i, s) in cohort.iter().enumerate() {
        by_class.entry(s.clinical.diagnosis.as_str()).or_default().push(i);
    }
    let classes: Vec<&'static str> = by_class.keys().copied().collect();
    for (c, members) in by_class.iter_mut() {
        let mut rng = rng_from(derive2(seed, 0xC1A55, fnv(c)));
        members.shuffle(&mut rng);
    }

    // alloc[bucket][class] by floor quotas plus greedy remainder repair.
    let nb = targets.len();
    let nc = classes.len();
    let mut alloc = vec![vec![0usize; nc]; nb];
    let mut frac: Vec<(f64, usize, usize)> = Vec::new();
    for (b, &tb) in targets.iter().enumerate() {
        for (c, class) in classes.iter().enumerate() {
            let quota = tb as f64 * by_class[class].len() as f64 / n as f64;
            alloc[b][c] = quota.floor() as usize;
            frac.push((quota - quota.floor(), b, c));
        }
    }
    let mut row_deficit: Vec<isize> = targets
        .iter()
        .enumerate()
        .map(|(b, &t)| t as isize - alloc[b].iter().sum::<usize>() as isize)
        .collect();
    let mut col_deficit: Vec<isize> = classes
        .iter()
        .enumerate()
        .map(|(c, class)| {
            by_class[class].len() as isize - alloc.iter().map(|row| row[c] as isize).sum::<isize>()
        })
        .collect();
    frac.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    for &(_, b, c) in &frac {
        if row_deficit[b] > 0 && col_deficit[c] > 0 {
            alloc[b][c] += 1;
            row_deficit[b] -= 1;
            col_deficit[c] -= 1;
        }
    }
    // Repair loop for any leftover deficits the greedy pass could not place.
    loop {
        let Some(b) = row_deficit.iter().position(|&d| d > 0) else { break };
        let c = col_deficit.iter().position(|&d| d > 0).expect("balanced transport");
        alloc[b][c] += 1;
        row_deficit[b] -= 1;
        col_deficit[c] -= 1;
    }

    let mut splits = Splits::default();
    for (c, class) in classes.iter().enumerate() {
        let members = &by_class[class];
        let mut cursor = 0;
        for (b, &split) in Split::ALL.iter().enumerate() {
            let take = alloc[b][c];
            splits
                .bucket_mut(split)
                .extend_from_slice(&members[cursor..cursor + take]);
            cursor += take;
        }
        debug_assert_eq!(cursor, members.len());
    }
    for s in Split::ALL {
        splits.bucket_mut(s).sort_unstable();
    }
    Ok(splits)
}

fn fnv(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

// ---- missingness ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MissingnessPlan {
    pub rate: f64,
    pub seed: u64,
    /// (subject index, modalities to remove) for each affected subject.
    pub removals: Vec<(usize, Vec<Modality>)>,
}

pub const MISSING_RATES: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Draw a plan over `n` subjects: exactly ceil(rate * n) affected, each
/// losing 1 or 2 modalities (never all three). Affected sets are nested
/// across rates for a fixed seed (the shuffle does not depend on the rate),
/// which couples the missing-rate study cells.
pub fn draw_plan(n: usize, rate: f64, seed: u64) -> Result<MissingnessPlan> {
    let valid = rate == 0.0 || MISSING_RATES.iter().any(|&r| (r - rate).abs() < 1e-9);
    if !valid {
        return Err(Error::config(format!("missing rate {rate} not in {{0, 0.2, 0.4, 0.6, 0.8}}")));
    }
    let affected = (rate * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(derive(seed, 0xA11));
    order.shuffle(&mut rng);
    let mut removals = Vec::with_capacity(affected);
    for &idx in order.iter().take(affected) {
        let mut sub_rng = rng_from(derive2(seed, 0xE30, idx as u64));
        let count = if sub_rng.gen_bool(0.5) { 1 } else { 2 };
        let mut mods = Modality::ALL.to_vec();
        mods.shuffle(&mut sub_rng);
        mods.truncate(count);
        removals.push((idx, mods));
    }
    removals.sort_by_key(|(i, _)| *i);
    Ok(MissingnessPlan { rate, seed, removals })
}

/// A removed ground-truth volume retained for generation metrics.
#[derive(Debug, Clone)]
pub struct HeldOutVolume {
    pub subject_idx: usize,
    pub subject_id: String,
    pub modality: Modality,
    pub volume: Volume,
}

/// Apply a plan, returning modified subjects plus the removed volumes.
pub fn apply_missingness(
    subjects: &[Subject],
    plan: &MissingnessPlan,
) -> Result<(Vec<Subject>, Vec<HeldOutVolume>)> {
    if let Some(&(idx, _)) = plan.removals.iter().find(|(i, _)| *i >= subjects.len()) {
        return Err(Error::config(format!(
            "plan refers to subject {idx} of {}",
            subjects.len()
        )));
    }
    let mut out = subjects.to_vec();
    let mut held = Vec::new();
    for (idx, mods) in &plan.removals {
        let subject = &mut out[*idx];
        if subject.present_modalities().len() <= mods.len() {
            return Err(Error::config(format!(
                "subject {} would lose all modalities",
                subject.id
            )));
        }
        for &m in mods {
            let vol = subject.volumes[m.index()]
                .take()
                .ok_or_else(|| Error::config(format!("subject {} lacks modality {m}", subject.id)))?;
            held.push(HeldOutVolume {
                subject_idx: *idx,
                subject_id: subject.id.clone(),
                modality: m,
                volume: vol,
            });
        }
    }
    Ok((out, held))
}

// ---- on-disk cohort ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub id: String,
    pub diagnosis: String,
    pub mmse: f32,
    pub adas13: f32,
    pub cdr_sob: f32,
    pub present_modalities: Vec<String>,
    pub split: String,
}

/// Write volumes (`<id>_<modality>.avol`, `<id>_mask.avol`) plus one JSON
/// metadata line per subject to `dir/cohort.jsonl`.
pub fn save_cohort(dir: &Path, cohort: &[Subject], splits: &Splits) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for (i, s) in cohort.iter().enumerate() {
        for m in Modality::ALL {
            if let Some(v) = s.volume(m) {
                write_volume(&dir.join(format!("{}_{}.avol", s.id, m.code())), v)?;
            }
        }
        write_volume(&dir.join(format!("{}_mask.avol", s.id)), &s.mask)?;
        let meta = SubjectMeta {
            id: s.id.clone(),
            diagnosis: s.clinical.diagnosis.as_str().to_string(),
            mmse: s.clinical.mmse,
            adas13: s.clinical.adas13,
            cdr_sob: s.clinical.cdr_sob,
            present_modalities: s.present_modalities().iter().map(|m| m.code().to_string()).collect(),
            split: splits
                .split_of(i)
                .map(|sp| sp.as_str().to_string())
                .unwrap_or_else(|| "none".to_string()),
        };
        lines.push_str(&serde_json::to_string(&meta)?);
        lines.push('\n');
    }
    std::fs::write(dir.join("cohort.jsonl"), lines)?;
    Ok(())
}

/// Load a cohort saved by [`save_cohort`]; subject order follows the
/// metadata file.
pub fn load_cohort(dir: &Path) -> Result<(Vec<Subject>, Splits)> {
    let meta_path = dir.join("cohort.jsonl");
    if !meta_path.exists() {
        return Err(Error::Prerequisite(format!("cohort metadata {}", meta_path.display())));
    }
    let text = std::fs::read_to_string(&meta_path)?;
    let mut cohort = Vec::new();
    let mut splits = Splits::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let meta: SubjectMeta = serde_json::from_str(line)?;
        let mut volumes: [Option<Volume>; 3] = [None, None, None];
        for code in &meta.present_modalities {
            let m = Modality::from_code(code)
                .ok_or_else(|| Error::config(format!("unknown modality code {code}")))?;
            volumes[m.index()] =
                Some(read_volume(&dir.join(format!("{}_{}.avol", meta.id, code)))?);
        }
        let mask = read_volume(&dir.join(format!("{}_mask.avol", meta.id)))?;
        let diagnosis = Diagnosis::from_str_opt(&meta.diagnosis)
            .ok_or_else(|| Error::config(format!("unknown diagnosis {}", meta.diagnosis)))?;
        let subject = Subject {
            id: meta.id.clone(),
            volumes,
            mask,
            clinical: ClinicalRecord {
                diagnosis,
                mmse: meta.mmse,
                adas13: meta.adas13,
                cdr_sob: meta.cdr_sob,
            },
        };
        if let Some(split) = Split::from_str_opt(&meta.split) {
            splits.bucket_mut(split).push(i);
        }
        cohort.push(subject);
    }
    Ok((cohort, splits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f32], b: &[f32]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x as f64 - ma, y as f64 - mb);
            cov += dx * dy;
            va += dx * dx;
            vb += dy * dy;
        }
        cov / (va.sqrt() * vb.sqrt())
    }

    fn dummy_subject(id: usize, dx: Diagnosis) -> Subject {
        let mut rng = rng_from(id as u64 + 1000);
        let clinical = sample_clinical(dx, &mut rng);
        Subject {
            id: format!("d{id:04}"),
            volumes: [
                Some(Volume::zeros((8, 8, 8))),
                Some(Volume::zeros((8, 8, 8))),
                Some(Volume::zeros((8, 8, 8))),
            ],
            mask: Volume::from_fn((8, 8, 8), |_, _, _| 1.0),
            clinical,
        }
    }

    fn dummy_cohort(n: usize) -> Vec<Subject> {
        let counts = apportion(n, &ADNI_MIX);
        let mut out = Vec::new();
        for (c, &count) in counts.iter().enumerate() {
            let dx = [Diagnosis::AD, Diagnosis::MCI, Diagnosis::HC][c];
            for _ in 0..count {
                out.push(dummy_subject(out.len(), dx));
            }
        }
        out
    }

    #[test]
    fn same_seed_gives_bit_identical_subject() {
        let profile = ClinicalRecord { diagnosis: Diagnosis::AD, mmse: 22.0, adas13: 28.0, cdr_sob: 4.5 };
        let a = generate_subject(77, (16, 16, 16), profile).unwrap();
        let b = generate_subject(77, (16, 16, 16), profile).unwrap();
        for m in Modality::ALL {
            let (va, vb) = (a.volume(m).unwrap(), b.volume(m).unwrap());
            assert!(va.voxels().iter().zip(vb.voxels()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn hc_profile_has_zero_lesion() {
        let subject = generate_subject(3, (16, 16, 16), ClinicalRecord::healthy()).unwrap();
        let anatomy = anatomy_field(3, (16, 16, 16));
        let b = subject.volume(Modality::B).unwrap();
        for (i, &v) in b.voxels().iter().enumerate() {
            let expected = (2.0 * remap_b(anatomy.voxels()[i]) - 1.0).clamp(-1.0, 1.0);
            assert_eq!(v.to_bits(), expected.to_bits(), "HC modality B must be a pure remap");
        }
        assert_eq!(lesion_depth(&ClinicalRecord::healthy()), 0.0);
    }

    #[test]
    fn modality_a_b_correlate_inside_mask_for_hc() {
        let mut worst = f64::INFINITY;
        for i in 0..100u64 {
            let mut rng = rng_from(derive(9000, i));
            let clinical = sample_clinical(Diagnosis::HC, &mut rng);
            let s = generate_subject(derive(42, i), (16, 16, 16), clinical).unwrap();
            let mask = s.mask.voxels();
            let a: Vec<f32> = s.volume(Modality::A).unwrap().voxels().iter().zip(mask)
                .filter(|(_, &m)| m > 0.5).map(|(&v, _)| v).collect();
            let b: Vec<f32> = s.volume(Modality::B).unwrap().voxels().iter().zip(mask)
                .filter(|(_, &m)| m > 0.5).map(|(&v, _)| v).collect();
            worst = worst.min(pearson(&a, &b));
        }
        assert!(worst > 0.5, "min in-mask corr(A,B) over 100 HC subjects = {worst}");
    }

    #[test]
    fn lesion_region_mean_is_non_increasing_in_severity() {
        let region = lesion_region(&anatomy_field(5, (16, 16, 16)));
        let mut last = f64::INFINITY;
        for mmse in [30.0f32, 23.9, 22.0, 20.0, 18.0] {
            let dx = if mmse >= 28.0 { Diagnosis::HC } else { Diagnosis::AD };
            let clinical = ClinicalRecord {
                diagnosis: dx,
                mmse,
                adas13: (3.5 * (30.0 - mmse)).clamp(0.0, 85.0),
                cdr_sob: (0.5625 * (30.0 - mmse)).clamp(0.0, 18.0),
            };
            let s = generate_subject(5, (16, 16, 16), clinical).unwrap();
            let b = s.volume(Modality::B).unwrap();
            let vals: Vec<f64> = b.voxels().iter().zip(&region)
                .filter(|(_, &r)| r).map(|(&v, _)| v as f64).collect();
            assert!(!vals.is_empty());
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean <= last + 1e-9, "severity {mmse}: lesion mean {mean} rose above {last}");
            last = mean;
        }
    }

    #[test]
    fn cohort_counts_follow_adni_mix() {
        assert_eq!(apportion(100, &ADNI_MIX), vec![19, 48, 33]);
        assert_eq!(apportion(120, &ADNI_MIX), vec![23, 58, 39]);
        assert_eq!(apportion(1028, &ADNI_MIX), vec![198, 495, 335]);
    }

    #[test]
    fn degenerate_mix_is_all_ad() {
        let cohort = compose_cohort(10, 3, (8, 8, 8), [1.0, 0.0, 0.0]).unwrap();
        assert!(cohort.iter().all(|s| s.clinical.diagnosis == Diagnosis::AD));
    }

    #[test]
    fn cohort_is_deterministic_and_rejects_small_n() {
        let a = compose_cohort(12, 11, (8, 8, 8), ADNI_MIX).unwrap();
        let b = compose_cohort(12, 11, (8, 8, 8), ADNI_MIX).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.clinical, y.clinical);
            for m in Modality::ALL {
                assert_eq!(x.volume(m).unwrap().voxels(), y.volume(m).unwrap().voxels());
            }
        }
        assert!(compose_cohort(9, 1, (8, 8, 8), ADNI_MIX).is_err());
        assert!(compose_cohort(20, 1, (8, 8, 8), [0.5, 0.2, 0.2]).is_err());
    }

    #[test]
    fn split_targets_mirror_the_paper_protocol() {
        assert_eq!(split_targets(1028), [480, 60, 60, 270, 30, 128]);
        let t103 = split_targets(103);
        assert_eq!(t103[0] + t103[1] + t103[2], 60, "gen pool of 103");
        assert_eq!(t103[5], 13, "clf test of 103");
        assert_eq!(t103[3] + t103[4], 30, "clf train pool of 103");
        assert_eq!(t103[4], 3, "clf val of 103");
        let t120 = split_targets(120);
        assert_eq!(t120[0] + t120[1] + t120[2], 70);
        assert_eq!(t120[5], 15);
    }

    #[test]
    fn split_is_a_partition_with_exact_sizes() {
        for n in [103usize, 120, 200] {
            let cohort = dummy_cohort(n);
            let splits = split_cohort(&cohort, 7).unwrap();
            let targets = split_targets(n);
            for (b, s) in Split::ALL.iter().enumerate() {
                assert_eq!(splits.bucket(*s).len(), targets[b], "bucket {s:?} at n={n}");
            }
            let mut seen = vec![false; n];
            for s in Split::ALL {
                for &i in splits.bucket(s) {
                    assert!(!seen[i], "subject {i} in two splits");
                    seen[i] = true;
                }
            }
            assert!(seen.into_iter().all(|x| x), "split must be exhaustive");
        }
    }

    #[test]
    fn split_strata_keep_both_classes_in_clf_buckets() {
        let cohort = dummy_cohort(120);
        let splits = split_cohort(&cohort, 13).unwrap();
        for bucket in [&splits.clf_train, &splits.clf_test] {
            let ad = bucket.iter().filter(|&&i| cohort[i].clinical.diagnosis == Diagnosis::AD).count();
            let hc = bucket.iter().filter(|&&i| cohort[i].clinical.diagnosis == Diagnosis::HC).count();
            assert!(ad >= 1 && hc >= 1, "stratified split must cover AD and HC");
        }
    }

    #[test]
    fn plans_hit_rate_exactly_and_keep_a_modality() {
        for trial in 0..1000u64 {
            let n = 20 + (trial % 30) as usize;
            let rate = MISSING_RATES[(trial % 4) as usize];
            let plan = draw_plan(n, rate, trial).unwrap();
            assert_eq!(plan.removals.len(), (rate * n as f64).ceil() as usize);
            for (_, mods) in &plan.removals {
                assert!(!mods.is_empty() && mods.len() <= 2, "1-2 modalities removed");
                let unique: std::collections::BTreeSet<_> =
                    mods.iter().map(|m| m.index()).collect();
                assert_eq!(unique.len(), mods.len(), "no duplicate removals");
            }
        }
    }

    #[test]
    fn plans_are_nested_across_rates() {
        let low = draw_plan(50, 0.2, 99).unwrap();
        let high = draw_plan(50, 0.6, 99).unwrap();
        let low_set: std::collections::BTreeSet<usize> =
            low.removals.iter().map(|(i, _)| *i).collect();
        let high_set: std::collections::BTreeSet<usize> =
            high.removals.iter().map(|(i, _)| *i).collect();
        assert!(low_set.is_subset(&high_set));
    }

    #[test]
    fn apply_missingness_rate_zero_is_identity() {
        let cohort = dummy_cohort(20);
        let plan = draw_plan(20, 0.0, 1).unwrap();
        let (after, held) = apply_missingness(&cohort, &plan).unwrap();
        assert!(held.is_empty());
        assert_eq!(after.len(), cohort.len());
        assert!(after.iter().all(|s| s.is_complete()));
    }

    #[test]
    fn apply_missingness_removes_planned_slots_and_holds_truth() {
        let cohort = dummy_cohort(300);
        let plan = draw_plan(300, 0.2, 5).unwrap();
        assert_eq!(plan.removals.len(), 60);
        let (after, held) = apply_missingness(&cohort, &plan).unwrap();
        let affected = after.iter().filter(|s| !s.is_complete()).count();
        assert_eq!(affected, 60);
        for s in &after {
            assert!(!s.present_modalities().is_empty());
        }
        let removed_total: usize = plan.removals.iter().map(|(_, m)| m.len()).sum();
        assert_eq!(held.len(), removed_total);
        for h in &held {
            assert!(after[h.subject_idx].volume(h.modality).is_none());
            assert_eq!(cohort[h.subject_idx].volume(h.modality).unwrap(), &h.volume);
        }
    }

    #[test]
    fn apply_missingness_rejects_mismatched_plan() {
        let cohort = dummy_cohort(20);
        let plan = draw_plan(50, 0.2, 5).unwrap();
        assert!(apply_missingness(&cohort, &plan).is_err());
    }

    #[test]
    fn draw_plan_rejects_unknown_rate() {
        assert!(draw_plan(50, 0.3, 1).is_err());
    }

    #[test]
    fn cohort_roundtrips_through_disk() {
        let cohort = compose_cohort(20, 21, (8, 8, 8), ADNI_MIX).unwrap();
        let splits = split_cohort(&cohort, 22).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_cohort(dir.path(), &cohort, &splits).unwrap();
        let (back, back_splits) = load_cohort(dir.path()).unwrap();
        assert_eq!(back.len(), cohort.len());
        assert_eq!(back_splits, splits);
        for (a, b) in cohort.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.clinical, b.clinical);
            for m in Modality::ALL {
                assert_eq!(a.volume(m).unwrap().voxels(), b.volume(m).unwrap().voxels());
            }
        }
    }

    #[test]
    fn generate_subject_rejects_degenerate_shape() {
        assert!(generate_subject(1, (4, 16, 16), ClinicalRecord::healthy()).is_err());
    }

    #[test]
    fn ad_example_record_is_in_range() {
        let record = ClinicalRecord { diagnosis: Diagnosis::AD, mmse: 22.0, adas13: 28.0, cdr_sob: 4.5 };
        record.validate().unwrap();
        // The AD sampling ranges must be able to produce this record.
        assert!((18.0..24.0).contains(&record.mmse));
        let sev = 30.0 - record.mmse;
        assert!((3.5 * sev - record.adas13).abs() <= 1.5 + 1e-6);
        assert!((0.5625 * sev - record.cdr_sob).abs() <= 0.4 + 1e-6);
    }
}
