//! Synthetic paired data and the experimental protocol.
//!
//! Real face datasets are out of scope; the stand-in task renders parent and
//! child images from a shared family latent, with `kin_strength` controlling
//! how much of each individual's latent is the family's. Positive pairs are
//! a family's own parent/child; negatives are built by a seeded cyclic
//! derangement of child assignments *within each fold*, so every image
//! appears in exactly one negative pair and no fold ever contains an image
//! from another fold's family. Folds partition families (all samples of one
//! family share a fold) and are stratified by relation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::cft;
use crate::error::{CfilError, Result};
use crate::rng::SeededRng;
use crate::shape::Shape;
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 64;
pub const IMAGE_LEN: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
pub const FOLD_COUNT: u8 = 5;

pub const MANIFEST_HEADER: &str = "pair_id,parent_path,child_path,label,relation,family_id,fold";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gender {
    Male,
    Female,
}

/// The four cross-generation relation tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    FatherSon,
    FatherDaughter,
    MotherSon,
    MotherDaughter,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::FatherSon,
        Relation::FatherDaughter,
        Relation::MotherSon,
        Relation::MotherDaughter,
    ];

    pub fn from_genders(parent: Gender, child: Gender) -> Relation {
        match (parent, child) {
            (Gender::Male, Gender::Male) => Relation::FatherSon,
            (Gender::Male, Gender::Female) => Relation::FatherDaughter,
            (Gender::Female, Gender::Male) => Relation::MotherSon,
            (Gender::Female, Gender::Female) => Relation::MotherDaughter,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Relation::FatherSon => "F-S",
            Relation::FatherDaughter => "F-D",
            Relation::MotherSon => "M-S",
            Relation::MotherDaughter => "M-D",
        }
    }

    pub fn parse(s: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.tag() == s)
    }
}

impl std::fmt::Display for Relation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Positive,
    Negative,
}

impl PairLabel {
    pub fn is_positive(self) -> bool {
        self == PairLabel::Positive
    }

    pub fn tag(self) -> &'static str {
        match self {
            PairLabel::Positive => "positive",
            PairLabel::Negative => "negative",
        }
    }

    pub fn parse(s: &str) -> Option<PairLabel> {
        match s {
            "positive" => Some(PairLabel::Positive),
            "negative" => Some(PairLabel::Negative),
            _ => None,
        }
    }
}

impl std::fmt::Display for PairLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.tag())
    }
}

/// Generator settings for the shared-latent family model.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFamilyModel {
    pub family_count: usize,
    /// Latent dimension g.
    pub latent_dim: usize,
    /// Kin strength rho in [0, 1]: each individual's latent is
    /// rho * family + sqrt(1 - rho^2) * own noise.
    pub kin_strength: f64,
    /// Pixel-level pre-activation noise scale sigma.
    pub noise_sigma: f64,
}

impl Default for SyntheticFamilyModel {
    fn default() -> Self {
        SyntheticFamilyModel {
            family_count: 50,
            latent_dim: 8,
            kin_strength: 0.9,
            noise_sigma: 0.05,
        }
    }
}

/// One generated family: a parent image and a child image sharing a latent.
#[derive(Debug, Clone)]
pub struct Family {
    pub id: u32,
    pub parent_gender: Gender,
    pub child_gender: Gender,
    pub parent_latent: Vec<f64>,
    pub child_latent: Vec<f64>,
    pub parent_image: Arc<Tensor<f32>>,
    pub child_image: Arc<Tensor<f32>>,
}

impl Family {
    pub fn relation(&self) -> Relation {
        Relation::from_genders(self.parent_gender, self.child_gender)
    }
}

/// One (parent image, child image) sample of the protocol.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub pair_id: u32,
    pub parent_image: Arc<Tensor<f32>>,
    pub child_image: Arc<Tensor<f32>>,
    pub label: PairLabel,
    pub relation: Relation,
    /// Family of the parent image.
    pub family_id: u32,
    /// Family of the child image (== family_id for positives).
    pub child_family_id: u32,
    pub fold: u8,
}

/// family id -> fold in 1..=5; all samples of one family share the fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    map: HashMap<u32, u8>,
}

impl FoldAssignment {
    pub fn fold_of(&self, family_id: u32) -> Option<u8> {
        self.map.get(&family_id).copied()
    }

    pub fn fold_sizes(&self) -> [usize; FOLD_COUNT as usize] {
        let mut sizes = [0usize; FOLD_COUNT as usize];
        for &f in self.map.values() {
            sizes[(f - 1) as usize] += 1;
        }
        sizes
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Render families deterministically from the seed. The decoder (a linear
/// map plus sigmoid) is derived from the same seed, so one (model, seed)
/// pair fixes every pixel.
pub fn generate(model: &SyntheticFamilyModel, seed: u64) -> Result<Vec<Family>> {
    if model.family_count < FOLD_COUNT as usize {
        return Err(CfilError::Config(format!(
            "family_count must be >= {} (one per fold), got {}",
            FOLD_COUNT, model.family_count
        )));
    }
    if model.latent_dim == 0 {
        return Err(CfilError::Config("latent_dim must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&model.kin_strength) {
        return Err(CfilError::Config(format!(
            "kin_strength must be in [0, 1], got {}",
            model.kin_strength
        )));
    }
    if model.noise_sigma < 0.0 || !model.noise_sigma.is_finite() {
        return Err(CfilError::Config(format!(
            "noise_sigma must be finite and >= 0, got {}",
            model.noise_sigma
        )));
    }

    let root = SeededRng::new(seed);
    let g = model.latent_dim;

    // Decoder: pixel p of image(z) = sigmoid(sum_k a[p][k] z_k + sigma * noise).
    // The first min(3, g) latent dimensions render as per-channel
    // brightness (DC) modes; the rest render as smooth low-frequency 2D
    // waves with seeded channel mixing. Both are the kind of spatially
    // coherent structure convolution and pooling preserve. No bias term: a
    // shared additive template would correlate the images of unrelated
    // pairs.
    // Pre-activation scale budget: total std ~0.75 (the sigmoid stays out
    // of saturation), with a fixed 40% variance share on the brightness
    // modes so their strength does not dilute as the latent grows.
    let mut dec_rng = root.derive("decoder", 0);
    let total_std = 0.75;
    let dc_dims = g.min(IMAGE_CHANNELS);
    let (dc_amp, tex_amp) = if g <= IMAGE_CHANNELS {
        (total_std / (g as f64).sqrt(), 0.0)
    } else {
        (
            total_std * (0.4f64 / dc_dims as f64).sqrt(),
            2.0 * total_std * (0.6f64 / (g - dc_dims) as f64).sqrt(),
        )
    };
    let mut decoder_a = vec![0.0f64; IMAGE_LEN * g];
    for k in 0..g {
        if k < dc_dims {
            let ch = k;
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let p = (ch * IMAGE_SIDE + y) * IMAGE_SIDE + x;
                    decoder_a[p * g + k] = dc_amp;
                }
            }
            continue;
        }
        let fy = dec_rng.below(2) as f64;
        let fx = dec_rng.below(2) as f64;
        let py = dec_rng.uniform_in(0.0, std::f64::consts::TAU);
        let px = dec_rng.uniform_in(0.0, std::f64::consts::TAU);
        let mix: Vec<f64> = (0..IMAGE_CHANNELS).map(|_| dec_rng.normal()).collect();
        for ch in 0..IMAGE_CHANNELS {
            for y in 0..IMAGE_SIDE {
                let wy = (std::f64::consts::TAU * fy * y as f64 / IMAGE_SIDE as f64 + py).cos();
                for x in 0..IMAGE_SIDE {
                    let wx =
                        (std::f64::consts::TAU * fx * x as f64 / IMAGE_SIDE as f64 + px).cos();
                    let p = (ch * IMAGE_SIDE + y) * IMAGE_SIDE + x;
                    decoder_a[p * g + k] = tex_amp * mix[ch] * wy * wx;
                }
            }
        }
    }

    // Mix so that corr(parent_k, child_k) = rho exactly.
    let shared = model.kin_strength.sqrt();
    let own = (1.0 - model.kin_strength).max(0.0).sqrt();
    let render = |z: &[f64], noise_rng: &mut SeededRng, sigma: f64| -> Tensor<f32> {
        let mut pixels = vec![0.0f32; IMAGE_LEN];
        for (p, px) in pixels.iter_mut().enumerate() {
            let mut pre = 0.0f64;
            let row = &decoder_a[p * g..(p + 1) * g];
            for (av, zv) in row.iter().zip(z) {
                pre += av * zv;
            }
            pre += sigma * noise_rng.normal();
            *px = sigmoid(pre) as f32;
        }
        Tensor::new(Shape::of(&[IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE]), pixels)
            .expect("image shape")
    };

    let mut families = Vec::with_capacity(model.family_count);
    for id in 0..model.family_count as u32 {
        // Fixed draw order per family: family latent, parent noise, child
        // noise, genders, then per-image pixel noise.
        let mut rng = root.derive("family", id as u64);
        let family_z: Vec<f64> = (0..g).map(|_| rng.normal()).collect();
        let parent_eps: Vec<f64> = (0..g).map(|_| rng.normal()).collect();
        let child_eps: Vec<f64> = (0..g).map(|_| rng.normal()).collect();
        let parent_latent: Vec<f64> = family_z
            .iter()
            .zip(&parent_eps)
            .map(|(&f, &e)| shared * f + own * e)
            .collect();
        let child_latent: Vec<f64> = family_z
            .iter()
            .zip(&child_eps)
            .map(|(&f, &e)| shared * f + own * e)
            .collect();
        let parent_gender = if rng.below(2) == 0 { Gender::Male } else { Gender::Female };
        let child_gender = if rng.below(2) == 0 { Gender::Male } else { Gender::Female };
        let parent_image = render(&parent_latent, &mut rng, model.noise_sigma);
        let child_image = render(&child_latent, &mut rng, model.noise_sigma);
        families.push(Family {
            id,
            parent_gender,
            child_gender,
            parent_latent,
            child_latent,
            parent_image: Arc::new(parent_image),
            child_image: Arc::new(child_image),
        });
    }
    Ok(families)
}

/// Partition families into five folds, stratified by relation so relation
/// counts per fold differ by at most one, and fold sizes by at most one.
pub fn assign_folds(families: &[Family], seed: u64) -> Result<FoldAssignment> {
    if families.len() < FOLD_COUNT as usize {
        return Err(CfilError::Config(format!(
            "need at least {} families for {}-fold assignment, got {}",
            FOLD_COUNT,
            FOLD_COUNT,
            families.len()
        )));
    }
    let root = SeededRng::new(seed);
    let mut map = HashMap::with_capacity(families.len());
    let mut cursor = root.derive("folds", 0).below(FOLD_COUNT as u64) as u8;
    for (ri, relation) in Relation::ALL.into_iter().enumerate() {
        let mut group: Vec<u32> = families
            .iter()
            .filter(|f| f.relation() == relation)
            .map(|f| f.id)
            .collect();
        let mut rng = root.derive("folds", 1 + ri as u64);
        rng.shuffle(&mut group);
        for id in group {
            map.insert(id, cursor + 1);
            cursor = (cursor + 1) % FOLD_COUNT;
        }
    }
    Ok(FoldAssignment { map })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Build one positive pair per family and one derangement negative per
/// family. The derangement is a seeded cyclic shift (offset coprime with
/// the fold's family count) applied within each fold, so negatives never
/// cross folds and every image is used in exactly one negative.
pub fn make_pairs(
    families: &[Family],
    folds: &FoldAssignment,
    seed: u64,
) -> Result<Vec<PairSample>> {
    if families.len() < 2 {
        return Err(CfilError::Config(format!(
            "need at least 2 families to derange negatives, got {}",
            families.len()
        )));
    }
    let by_id: HashMap<u32, &Family> = families.iter().map(|f| (f.id, f)).collect();
    let root = SeededRng::new(seed);

    let mut pairs = Vec::with_capacity(families.len() * 2);
    let mut next_id = 0u32;
    for f in families {
        let fold = folds.fold_of(f.id).ok_or_else(|| {
            CfilError::Config(format!("family {} has no fold assignment", f.id))
        })?;
        pairs.push(PairSample {
            pair_id: next_id,
            parent_image: Arc::clone(&f.parent_image),
            child_image: Arc::clone(&f.child_image),
            label: PairLabel::Positive,
            relation: f.relation(),
            family_id: f.id,
            child_family_id: f.id,
            fold,
        });
        next_id += 1;
    }

    for fold in 1..=FOLD_COUNT {
        let mut members: Vec<u32> = families
            .iter()
            .filter(|f| folds.fold_of(f.id) == Some(fold))
            .map(|f| f.id)
            .collect();
        members.sort_unstable();
        let c = members.len() as u64;
        if c < 2 {
            return Err(CfilError::Config(format!(
                "fold {fold} holds {c} families; each fold needs >= 2 to build derangement negatives"
            )));
        }
        let coprimes: Vec<u64> = (1..c).filter(|&o| gcd(o, c) == 1).collect();
        let mut rng = root.derive("derange", fold as u64);
        let offset = coprimes[rng.below(coprimes.len() as u64) as usize];
        for (idx, &parent_fam) in members.iter().enumerate() {
            let child_fam = members[(idx + offset as usize) % members.len()];
            let pf = by_id[&parent_fam];
            let cf = by_id[&child_fam];
            pairs.push(PairSample {
                pair_id: next_id,
                parent_image: Arc::clone(&pf.parent_image),
                child_image: Arc::clone(&cf.child_image),
                label: PairLabel::Negative,
                relation: Relation::from_genders(pf.parent_gender, cf.child_gender),
                family_id: parent_fam,
                child_family_id: child_fam,
                fold,
            });
            next_id += 1;
        }
    }
    Ok(pairs)
}

/// A full pair dataset plus protocol checks.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<PairSample>,
}

impl Dataset {
    /// Train = every fold except `fold`, test = `fold`.
    pub fn select_split(&self, fold: u8) -> Result<(Vec<&PairSample>, Vec<&PairSample>)> {
        if !(1..=FOLD_COUNT).contains(&fold) {
            return Err(CfilError::Config(format!(
                "fold must be in 1..={FOLD_COUNT}, got {fold}"
            )));
        }
        let (test, train): (Vec<&PairSample>, Vec<&PairSample>) =
            self.pairs.iter().partition(|p| p.fold == fold);
        if train.is_empty() {
            return Err(CfilError::Config(format!("no training pairs outside fold {fold}")));
        }
        Ok((train, test))
    }

    /// Enumeration checks of the protocol invariants: 1:1 label balance,
    /// positives within-family, negatives a within-fold family derangement
    /// with each image used exactly once, and folds partitioning families.
    pub fn verify_protocol(&self) -> Result<()> {
        let positives: Vec<&PairSample> =
            self.pairs.iter().filter(|p| p.label.is_positive()).collect();
        let negatives: Vec<&PairSample> =
            self.pairs.iter().filter(|p| !p.label.is_positive()).collect();
        if positives.len() != negatives.len() {
            return Err(CfilError::Input(format!(
                "label imbalance: {} positives vs {} negatives",
                positives.len(),
                negatives.len()
            )));
        }

        // Folds partition families: one fold per family id everywhere.
        let mut family_fold: HashMap<u32, u8> = HashMap::new();
        for p in &self.pairs {
            for fam in [p.family_id, p.child_family_id] {
                match family_fold.get(&fam) {
                    None => {
                        family_fold.insert(fam, p.fold);
                    }
                    Some(&f) if f == p.fold => {}
                    Some(&f) => {
                        return Err(CfilError::Input(format!(
                            "family {fam} appears in folds {f} and {} — folds must be family-disjoint",
                            p.fold
                        )));
                    }
                }
            }
        }

        let mut parent_seen: HashMap<u32, usize> = HashMap::new();
        let mut child_seen: HashMap<u32, usize> = HashMap::new();
        for p in &positives {
            if p.family_id != p.child_family_id {
                return Err(CfilError::Input(format!(
                    "positive pair {} crosses families {} and {}",
                    p.pair_id, p.family_id, p.child_family_id
                )));
            }
        }
        for n in &negatives {
            if n.family_id == n.child_family_id {
                return Err(CfilError::Input(format!(
                    "negative pair {} is not deranged: both images from family {}",
                    n.pair_id, n.family_id
                )));
            }
            *parent_seen.entry(n.family_id).or_insert(0) += 1;
            *child_seen.entry(n.child_family_id).or_insert(0) += 1;
        }
        for p in &positives {
            if parent_seen.get(&p.family_id) != Some(&1) {
                return Err(CfilError::Input(format!(
                    "parent image of family {} used {} times in negatives (expected once)",
                    p.family_id,
                    parent_seen.get(&p.family_id).unwrap_or(&0)
                )));
            }
            if child_seen.get(&p.family_id) != Some(&1) {
                return Err(CfilError::Input(format!(
                    "child image of family {} used {} times in negatives (expected once)",
                    p.family_id,
                    child_seen.get(&p.family_id).unwrap_or(&0)
                )));
            }
        }

        // Positive relation counts per fold balanced within +-1.
        for relation in Relation::ALL {
            let mut counts = [0usize; FOLD_COUNT as usize];
            for p in &positives {
                if p.relation == relation {
                    counts[(p.fold - 1) as usize] += 1;
                }
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            if hi - lo > 1 {
                return Err(CfilError::Input(format!(
                    "relation {relation} spread across folds is {counts:?}; max spread must be 1"
                )));
            }
        }
        Ok(())
    }
}

/// End-to-end generation: families -> folds -> pairs, verified.
pub fn generate_dataset(model: &SyntheticFamilyModel, seed: u64) -> Result<Dataset> {
    let families = generate(model, seed)?;
    let folds = assign_folds(&families, seed)?;
    let pairs = make_pairs(&families, &folds, seed)?;
    let ds = Dataset { pairs };
    ds.verify_protocol()?;
    Ok(ds)
}

fn image_file_name(family_id: u32, parent: bool) -> String {
    format!("f{family_id:05}_{}.cft", if parent { "p" } else { "c" })
}

/// Write `manifest.csv` plus one CFT1 file per unique image under
/// `images/` beside it. Paths in the manifest are relative to it.
pub fn save_manifest(dataset: &Dataset, manifest_path: impl AsRef<Path>) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| CfilError::io(&image_dir, e))?;

    let mut written: HashMap<u32, ()> = HashMap::new();
    let mut rows = String::from(MANIFEST_HEADER);
    rows.push('\n');
    for p in &dataset.pairs {
        if p.label.is_positive() && written.insert(p.family_id, ()).is_none() {
            cft::save_cft1(image_dir.join(image_file_name(p.family_id, true)), &p.parent_image)?;
            cft::save_cft1(image_dir.join(image_file_name(p.family_id, false)), &p.child_image)?;
        }
    }
    for p in &dataset.pairs {
        let parent_rel = format!("images/{}", image_file_name(p.family_id, true));
        let child_rel = format!("images/{}", image_file_name(p.child_family_id, false));
        rows.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.pair_id, parent_rel, child_rel, p.label, p.relation, p.family_id, p.fold
        ));
    }
    fs::write(manifest_path, rows).map_err(|e| CfilError::io(manifest_path, e))
}

/// Load a manifest and its referenced CFT1 images. Rows are validated
/// (arity, label, relation, fold range) with 1-based line numbers; child
/// family ids are recovered by matching child images to positive pairs.
pub fn load_manifest(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let text =
        fs::read_to_string(manifest_path).map_err(|e| CfilError::io(manifest_path, e))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        Some((_, h)) => {
            return Err(CfilError::Parse {
                line: 1,
                message: format!("bad manifest header '{h}' (expected '{MANIFEST_HEADER}')"),
            })
        }
        None => {
            return Err(CfilError::Parse {
                line: 1,
                message: "empty manifest".into(),
            })
        }
    }

    let mut image_cache: HashMap<String, Arc<Tensor<f32>>> = HashMap::new();
    let mut load_image = |rel: &str| -> Result<Arc<Tensor<f32>>> {
        if let Some(img) = image_cache.get(rel) {
            return Ok(Arc::clone(img));
        }
        let full: PathBuf = dir.join(rel);
        let img = Arc::new(cft::load_cft1(&full)?);
        image_cache.insert(rel.to_string(), Arc::clone(&img));
        Ok(img)
    };

    struct RawRow {
        line: usize,
        pair_id: u32,
        parent_rel: String,
        child_rel: String,
        label: PairLabel,
        relation: Relation,
        family_id: u32,
        fold: u8,
    }

    let mut raws = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(CfilError::Parse {
                line: lineno,
                message: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let parse_err = |message: String| CfilError::Parse { line: lineno, message };
        let pair_id: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad pair_id '{}'", fields[0])))?;
        let label = PairLabel::parse(fields[3])
            .ok_or_else(|| parse_err(format!("bad label '{}'", fields[3])))?;
        let relation = Relation::parse(fields[4])
            .ok_or_else(|| parse_err(format!("bad relation '{}'", fields[4])))?;
        let family_id: u32 = fields[5]
            .parse()
            .map_err(|_| parse_err(format!("bad family_id '{}'", fields[5])))?;
        let fold: u8 = fields[6]
            .parse()
            .map_err(|_| parse_err(format!("bad fold '{}'", fields[6])))?;
        if !(1..=FOLD_COUNT).contains(&fold) {
            return Err(parse_err(format!("fold {fold} outside 1..={FOLD_COUNT}")));
        }
        raws.push(RawRow {
            line: lineno,
            pair_id,
            parent_rel: fields[1].to_string(),
            child_rel: fields[2].to_string(),
            label,
            relation,
            family_id,
            fold,
        });
    }

    // Every child image appears in exactly one positive pair, which names
    // its family; negatives inherit the child family from that map.
    let mut child_family: HashMap<String, u32> = HashMap::new();
    for r in raws.iter().filter(|r| r.label.is_positive()) {
        child_family.insert(r.child_rel.clone(), r.family_id);
    }

    let mut pairs = Vec::with_capacity(raws.len());
    for r in raws {
        let child_family_id = match r.label {
            PairLabel::Positive => r.family_id,
            PairLabel::Negative => *child_family.get(&r.child_rel).ok_or_else(|| {
                CfilError::Parse {
                    line: r.line,
                    message: format!(
                        "negative pair references child image '{}' with no positive pair",
                        r.child_rel
                    ),
                }
            })?,
        };
        pairs.push(PairSample {
            pair_id: r.pair_id,
            parent_image: load_image(&r.parent_rel)?,
            child_image: load_image(&r.child_rel)?,
            label: r.label,
            relation: r.relation,
            family_id: r.family_id,
            child_family_id,
            fold: r.fold,
        });
    }
    Ok(Dataset { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(families: usize) -> SyntheticFamilyModel {
        SyntheticFamilyModel {
            family_count: families,
            latent_dim: 4,
            kin_strength: 0.9,
            noise_sigma: 0.05,
        }
    }

    #[test]
    fn generate_requires_five_families() {
        let err = generate(&small_model(3), 1).unwrap_err();
        assert!(matches!(err, CfilError::Config(_)));
    }

    #[test]
    fn generate_is_deterministic() {
        let a = generate(&small_model(8), 7).unwrap();
        let b = generate(&small_model(8), 7).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert!(cft::bits_equal(&fa.parent_image, &fb.parent_image));
            assert!(cft::bits_equal(&fa.child_image, &fb.child_image));
            assert_eq!(fa.parent_gender, fb.parent_gender);
        }
        let c = generate(&small_model(8), 8).unwrap();
        assert!(!cft::bits_equal(&a[0].parent_image, &c[0].parent_image));
    }

    #[test]
    fn rho_one_sigma_zero_gives_identical_images() {
        let model = SyntheticFamilyModel {
            family_count: 6,
            latent_dim: 4,
            kin_strength: 1.0,
            noise_sigma: 0.0,
        };
        for f in generate(&model, 3).unwrap() {
            assert!(cft::bits_equal(&f.parent_image, &f.child_image));
        }
    }

    #[test]
    fn rho_zero_decorrelates_pixels() {
        let model = SyntheticFamilyModel {
            family_count: 500,
            latent_dim: 4,
            kin_strength: 0.0,
            noise_sigma: 0.05,
        };
        let families = generate(&model, 11).unwrap();
        let mut corr_sum = 0.0f64;
        for f in &families {
            let p: Vec<f64> = f.parent_image.values().iter().map(|&v| v as f64).collect();
            let c: Vec<f64> = f.child_image.values().iter().map(|&v| v as f64).collect();
            let n = p.len() as f64;
            let (mp, mc) = (p.iter().sum::<f64>() / n, c.iter().sum::<f64>() / n);
            let mut cov = 0.0;
            let mut vp = 0.0;
            let mut vc = 0.0;
            for (a, b) in p.iter().zip(&c) {
                cov += (a - mp) * (b - mc);
                vp += (a - mp) * (a - mp);
                vc += (b - mc) * (b - mc);
            }
            corr_sum += cov / (vp.sqrt() * vc.sqrt());
        }
        let mean_corr = corr_sum / families.len() as f64;
        assert!(mean_corr.abs() < 0.05, "mean pixel correlation {mean_corr}");
    }

    #[test]
    fn latent_correlation_increases_with_rho() {
        let avg_dot = |rho: f64| -> f64 {
            let model = SyntheticFamilyModel {
                family_count: 300,
                latent_dim: 6,
                kin_strength: rho,
                noise_sigma: 0.0,
            };
            let families = generate(&model, 5).unwrap();
            let mut acc = 0.0;
            for f in &families {
                let dot: f64 = f
                    .parent_latent
                    .iter()
                    .zip(&f.child_latent)
                    .map(|(a, b)| a * b)
                    .sum();
                acc += dot / f.parent_latent.len() as f64;
            }
            acc / families.len() as f64
        };
        let low = avg_dot(0.2);
        let mid = avg_dot(0.6);
        let high = avg_dot(0.95);
        assert!(low < mid && mid < high, "{low} {mid} {high}");
    }

    #[test]
    fn folds_partition_and_balance() {
        let families = generate(&small_model(10), 13).unwrap();
        let folds = assign_folds(&families, 13).unwrap();
        let sizes = folds.fold_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 10);
        assert_eq!(sizes, [2, 2, 2, 2, 2]);
    }

    #[test]
    fn fold_sizes_differ_by_at_most_one() {
        let families = generate(&small_model(23), 29).unwrap();
        let folds = assign_folds(&families, 29).unwrap();
        let sizes = folds.fold_sizes();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1, "{sizes:?}");
    }

    #[test]
    fn pairs_counts_and_derangement() {
        let ds = generate_dataset(&small_model(100), 17).unwrap();
        let pos = ds.pairs.iter().filter(|p| p.label.is_positive()).count();
        let neg = ds.pairs.len() - pos;
        assert_eq!(pos, 100);
        assert_eq!(neg, 100);
        ds.verify_protocol().unwrap();
        for p in ds.pairs.iter().filter(|p| !p.label.is_positive()) {
            assert_ne!(p.family_id, p.child_family_id);
        }
    }

    #[test]
    fn protocol_holds_across_many_seeds() {
        for seed in 0..50 {
            let ds = generate_dataset(&small_model(17), seed).unwrap();
            ds.verify_protocol().unwrap();
        }
    }

    #[test]
    fn split_is_a_partition() {
        let ds = generate_dataset(&small_model(25), 23).unwrap();
        let (train, test) = ds.select_split(2).unwrap();
        assert_eq!(train.len() + test.len(), ds.pairs.len());
        for p in &train {
            assert_ne!(p.fold, 2);
        }
        for p in &test {
            assert_eq!(p.fold, 2);
        }
        // 25 families -> folds of 5 -> 40 train pairs vs 10 test pairs.
        assert_eq!(test.len(), 10);
        assert_eq!(train.len(), 40);
        assert!(ds.select_split(0).is_err());
        assert!(ds.select_split(6).is_err());
    }

    #[test]
    fn manifest_roundtrip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let ds = generate_dataset(&small_model(10), 31).unwrap();
        save_manifest(&ds, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.pairs.len(), ds.pairs.len());
        for (a, b) in ds.pairs.iter().zip(&back.pairs) {
            assert_eq!(a.pair_id, b.pair_id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.relation, b.relation);
            assert_eq!(a.family_id, b.family_id);
            assert_eq!(a.child_family_id, b.child_family_id);
            assert_eq!(a.fold, b.fold);
            assert!(cft::bits_equal(&a.parent_image, &b.parent_image));
            assert!(cft::bits_equal(&a.child_image, &b.child_image));
        }
        back.verify_protocol().unwrap();

        // Saving again produces byte-identical files.
        let dir2 = tempfile::tempdir().unwrap();
        let path2 = dir2.path().join("manifest.csv");
        save_manifest(&back, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn manifest_rejects_bad_fold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let ds = generate_dataset(&small_model(10), 37).unwrap();
        save_manifest(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let hacked = text.replacen(",1\n", ",7\n", 1);
        assert_ne!(text, hacked);
        fs::write(&path, hacked).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, CfilError::Parse { .. }), "{err}");
    }

    #[test]
    fn manifest_missing_image_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let ds = generate_dataset(&small_model(10), 41).unwrap();
        save_manifest(&ds, &path).unwrap();
        fs::remove_file(dir.path().join("images/f00000_p.cft")).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, CfilError::Io { .. }), "{err}");
    }
}
