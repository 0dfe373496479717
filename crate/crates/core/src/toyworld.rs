//! Deterministic generator of a toy compositional domain.
//!
//! A [`Scene`] is a discrete tuple (subject, object, attribute, relation)
//! drawn from small vocabularies. Scenes are rendered into continuous
//! feature vectors through fixed random linear maps plus Gaussian noise, one
//! map for the "image" side and one for the "caption" side. Because the
//! semantics are discrete slots, the difference between a subtle variation
//! (one edited slot) and an over-modification (two or more edited slots) is
//! exactly controllable.
//!
//! Each sample group holds a real pair, a synthetic hard-negative pair (the
//! base scene with one slot edited), and a synthetic positive pair (the base
//! scene re-rendered with fresh noise). With configurable probabilities the
//! synthetic positive is silently corrupted (rendered from an edited scene
//! instead) and the synthetic negative is over-modified (two edits instead
//! of one). The corruption flags are stored for diagnostics only and must
//! never be consumed by training code.
//!
//! All randomness flows through named counter streams derived from the
//! config seed, so any group or evaluation case can be regenerated in
//! isolation and datasets are independent of generation order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::Matrix;

/// File format version written into dataset headers.
pub const DATASET_VERSION: u32 = 1;

/// Maximum redraw attempts before giving up on full-rank render maps.
const MAX_MAP_DRAWS: usize = 64;

/// Errors produced by world construction, editing, and dataset files.
#[derive(Debug, Error)]
pub enum WorldError {
    /// The configuration violates a structural invariant.
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    /// More slot edits were requested than the vocabularies allow.
    #[error("cannot change {requested} scene slots, only {feasible} have enough vocabulary")]
    ImpossibleEdit { requested: usize, feasible: usize },
    /// An evaluation set of size zero was requested.
    #[error("evaluation set size must be at least 1")]
    InvalidCount,
    /// Random render maps stayed rank-deficient after the retry budget.
    #[error("render maps stayed rank-deficient after {0} draws")]
    DegenerateMaps(usize),
    /// Underlying file I/O failed.
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    /// A dataset file does not match its own header.
    #[error("corrupt dataset file: {0}")]
    CorruptHeader(String),
}

/// Named sub-streams of the world seed.
///
/// Every consumer of randomness owns one domain, and within a domain each
/// item owns one index, so streams never collide and items can be
/// regenerated independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    /// Drawing the fixed render maps at world construction.
    WorldBuild = 1,
    /// One stream per sample group index.
    Group = 2,
    /// One stream per evaluation set.
    Eval = 3,
    /// Encoder parameter initialization in the trainer.
    TrainerInit = 4,
}

/// Seeded generator for `(seed, domain, index)`.
///
/// The domain tag occupies the high bits of the cipher stream counter and
/// the index the low 48 bits, so distinct `(domain, index)` pairs yield
/// independent streams of the same seeded key.
pub fn stream_rng(seed: u64, domain: StreamDomain, index: u64) -> ChaCha8Rng {
    debug_assert!(index < (1 << 48), "stream index exceeds 48 bits");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}

/// One discrete scene: who does what to whom, and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub subject_id: usize,
    pub object_id: usize,
    pub attribute_id: usize,
    pub relation_id: usize,
}

/// The four editable slots of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EditSlot {
    Subject,
    Object,
    Attribute,
    Relation,
}

const ALL_SLOTS: [EditSlot; 4] = [
    EditSlot::Subject,
    EditSlot::Object,
    EditSlot::Attribute,
    EditSlot::Relation,
];

/// The kind of semantic edit separating an evaluation pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    /// The negative caption redraws the attribute slot.
    Attribute,
    /// The negative caption redraws the relation slot.
    Relation,
    /// The negative caption exchanges subject and object.
    ObjectSwap,
}

/// All edit kinds in round-robin order.
pub const ALL_EDIT_KINDS: [EditKind; 3] = [EditKind::Attribute, EditKind::Relation, EditKind::ObjectSwap];

impl EditKind {
    /// Stable lowercase name used in reports and CSV columns.
    pub fn name(self) -> &'static str {
        match self {
            EditKind::Attribute => "attribute",
            EditKind::Relation => "relation",
            EditKind::ObjectSwap => "object_swap",
        }
    }
}

/// Configuration of the toy world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Vocabulary size shared by subject and object slots.
    pub v_obj: usize,
    /// Attribute vocabulary size.
    pub v_att: usize,
    /// Relation vocabulary size.
    pub v_rel: usize,
    /// Raw image feature dimension.
    pub d_i: usize,
    /// Raw caption feature dimension.
    pub d_t: usize,
    /// Additive Gaussian noise scale on rendered images.
    pub sigma_i: f64,
    /// Additive Gaussian noise scale on rendered captions.
    pub sigma_t: f64,
    /// Probability that a synthetic positive is rendered from an edited
    /// scene instead of the base scene.
    pub p_bad_pos: f64,
    /// Probability that a synthetic negative receives two edits instead of
    /// one.
    pub p_easy_neg: f64,
    /// Seed from which every stream of this world is derived.
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            v_obj: 128,
            v_att: 128,
            v_rel: 128,
            d_i: 512,
            d_t: 512,
            sigma_i: 1.1,
            sigma_t: 1.1,
            p_bad_pos: 0.1,
            p_easy_neg: 0.1,
            seed: 42,
        }
    }
}

impl WorldConfig {
    /// Width of the one-hot scene encoding: two object blocks plus the
    /// attribute and relation blocks.
    pub fn semantic_dim(&self) -> usize {
        2 * self.v_obj + self.v_att + self.v_rel
    }

    /// Checks the structural invariants of the configuration.
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.v_obj < 2 || self.v_att < 2 || self.v_rel < 2 {
            return Err(WorldError::InvalidConfig(
                "vocabulary sizes must be at least 2".into(),
            ));
        }
        let s = self.semantic_dim();
        if self.d_i < s || self.d_t < s {
            return Err(WorldError::InvalidConfig(format!(
                "feature dims must be at least the semantic dim {s} (got d_i={}, d_t={})",
                self.d_i, self.d_t
            )));
        }
        if !(self.sigma_i >= 0.0 && self.sigma_i.is_finite())
            || !(self.sigma_t >= 0.0 && self.sigma_t.is_finite())
        {
            return Err(WorldError::InvalidConfig(
                "noise scales must be finite and non-negative".into(),
            ));
        }
        for (name, p) in [("p_bad_pos", self.p_bad_pos), ("p_easy_neg", self.p_easy_neg)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(WorldError::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// One sample group: a real pair plus synthetic negative and synthetic
/// positive pairs, with hidden diagnostics about how they were generated.
///
/// The `diag_*` flags record which corruption branch fired during
/// generation. They exist for tests and dataset summaries only; training
/// code must discover bad samples from similarities alone.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGroup {
    pub img_r: Vec<f64>,
    pub img_sn: Vec<f64>,
    pub img_sp: Vec<f64>,
    pub cap_r: Vec<f64>,
    pub cap_sn: Vec<f64>,
    pub cap_sp: Vec<f64>,
    pub diag_pos_corrupted: bool,
    pub diag_neg_easy: bool,
}

/// One evaluation case: an image with a matching caption and a caption
/// rendered from a minimally edited scene.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub image: Vec<f64>,
    pub caption_pos: Vec<f64>,
    pub caption_neg: Vec<f64>,
    pub edit_kind: EditKind,
}

/// A fully built world: validated config plus the fixed render maps.
#[derive(Debug, Clone)]
pub struct World {
    cfg: WorldConfig,
    g_img: Matrix,
    g_txt: Matrix,
}

impl World {
    /// Validates the config and draws the two render maps from the world
    /// build stream, redrawing until both have full column rank.
    pub fn new(cfg: WorldConfig) -> Result<Self, WorldError> {
        cfg.validate()?;
        let s = cfg.semantic_dim();
        let mut rng = stream_rng(cfg.seed, StreamDomain::WorldBuild, 0);
        let g_img = draw_full_rank_map(&mut rng, cfg.d_i, s)?;
        let g_txt = draw_full_rank_map(&mut rng, cfg.d_t, s)?;
        Ok(World { cfg, g_img, g_txt })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    /// The fixed linear map rendering scenes to image features.
    pub fn image_map(&self) -> &Matrix {
        &self.g_img
    }

    /// The fixed linear map rendering scenes to caption features.
    pub fn caption_map(&self) -> &Matrix {
        &self.g_txt
    }

    /// Generator stream owned by sample group `index`.
    pub fn group_rng(&self, index: u64) -> ChaCha8Rng {
        stream_rng(self.cfg.seed, StreamDomain::Group, index)
    }

    /// Generator stream owned by evaluation set `index`.
    pub fn eval_rng(&self, index: u64) -> ChaCha8Rng {
        stream_rng(self.cfg.seed, StreamDomain::Eval, index)
    }

    /// Renders the image-side feature vector of a scene.
    pub fn render_image(&self, scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<f64> {
        render(&self.g_img, scene, &self.cfg, self.cfg.sigma_i, rng)
    }

    /// Renders the caption-side feature vector of a scene.
    pub fn render_caption(&self, scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<f64> {
        render(&self.g_txt, scene, &self.cfg, self.cfg.sigma_t, rng)
    }

    /// Draws one sample group from the given stream.
    ///
    /// The real pair renders the base scene. The synthetic negative renders
    /// the base scene with one slot edited, or two with probability
    /// `p_easy_neg`. The synthetic positive re-renders the base scene with
    /// fresh noise, or, with probability `p_bad_pos`, renders a one-edit
    /// scene while still being labeled positive downstream.
    pub fn make_group(&self, rng: &mut ChaCha8Rng) -> SampleGroup {
        let cfg = &self.cfg;
        let base = sample_scene(rng, cfg);
        let img_r = self.render_image(&base, rng);
        let cap_r = self.render_caption(&base, rng);

        let easy = rng.gen_bool(cfg.p_easy_neg);
        let sn_edits = if easy { 2 } else { 1 };
        let sn_scene = perturb(&base, rng, sn_edits, cfg)
            .expect("a validated config always leaves two editable slots");
        let img_sn = self.render_image(&sn_scene, rng);
        let cap_sn = self.render_caption(&sn_scene, rng);

        let bad = rng.gen_bool(cfg.p_bad_pos);
        let sp_scene = if bad {
            perturb(&base, rng, 1, cfg)
                .expect("a validated config always leaves an editable slot")
        } else {
            base
        };
        let img_sp = self.render_image(&sp_scene, rng);
        let cap_sp = self.render_caption(&sp_scene, rng);

        SampleGroup {
            img_r,
            img_sn,
            img_sp,
            cap_r,
            cap_sn,
            cap_sp,
            diag_pos_corrupted: bad,
            diag_neg_easy: easy,
        }
    }

    /// Regenerates the sample group with the given index.
    pub fn group_at(&self, index: u64) -> SampleGroup {
        self.make_group(&mut self.group_rng(index))
    }

    /// Builds `count` evaluation cases from one stream.
    ///
    /// With `edit_kind = None` the three kinds are assigned round-robin in
    /// index order; otherwise every case uses the requested kind. Each case
    /// pairs an image with a caption of its own scene and a caption of a
    /// scene differing exactly as named by the kind.
    pub fn make_eval_set(
        &self,
        rng: &mut ChaCha8Rng,
        count: usize,
        edit_kind: Option<EditKind>,
    ) -> Result<Vec<EvalCase>, WorldError> {
        if count == 0 {
            return Err(WorldError::InvalidCount);
        }
        let cfg = &self.cfg;
        let mut cases = Vec::with_capacity(count);
        for i in 0..count {
            let kind = edit_kind.unwrap_or(ALL_EDIT_KINDS[i % ALL_EDIT_KINDS.len()]);
            let scene = sample_scene(rng, cfg);
            let neg_scene = match kind {
                EditKind::Attribute => Scene {
                    attribute_id: draw_excluding(rng, cfg.v_att, &[scene.attribute_id]),
                    ..scene
                },
                EditKind::Relation => Scene {
                    relation_id: draw_excluding(rng, cfg.v_rel, &[scene.relation_id]),
                    ..scene
                },
                EditKind::ObjectSwap => Scene {
                    subject_id: scene.object_id,
                    object_id: scene.subject_id,
                    ..scene
                },
            };
            let image = self.render_image(&scene, rng);
            let caption_pos = self.render_caption(&scene, rng);
            let caption_neg = self.render_caption(&neg_scene, rng);
            cases.push(EvalCase {
                image,
                caption_pos,
                caption_neg,
                edit_kind: kind,
            });
        }
        Ok(cases)
    }
}

/// Draws a uniform scene with distinct subject and object.
pub fn sample_scene(rng: &mut ChaCha8Rng, cfg: &WorldConfig) -> Scene {
    let subject_id = rng.gen_range(0..cfg.v_obj);
    let object_id = draw_excluding(rng, cfg.v_obj, &[subject_id]);
    let attribute_id = rng.gen_range(0..cfg.v_att);
    let relation_id = rng.gen_range(0..cfg.v_rel);
    Scene {
        subject_id,
        object_id,
        attribute_id,
        relation_id,
    }
}

/// Returns a copy of `scene` with exactly `n_edits` distinct slots changed.
///
/// Edited slots are drawn uniformly from the slots whose vocabulary is large
/// enough to admit a change (subject and object need a third value because
/// they must stay distinct). Fails with [`WorldError::ImpossibleEdit`] when
/// fewer than `n_edits` slots are editable.
pub fn perturb(
    scene: &Scene,
    rng: &mut ChaCha8Rng,
    n_edits: usize,
    cfg: &WorldConfig,
) -> Result<Scene, WorldError> {
    assert!(n_edits >= 1, "perturb requires at least one edit");
    let feasible: Vec<EditSlot> = ALL_SLOTS
        .into_iter()
        .filter(|slot| match slot {
            EditSlot::Subject | EditSlot::Object => cfg.v_obj >= 3,
            EditSlot::Attribute => cfg.v_att >= 2,
            EditSlot::Relation => cfg.v_rel >= 2,
        })
        .collect();
    if n_edits > feasible.len() {
        return Err(WorldError::ImpossibleEdit {
            requested: n_edits,
            feasible: feasible.len(),
        });
    }

    let mut pool = feasible;
    let mut chosen = Vec::with_capacity(n_edits);
    for _ in 0..n_edits {
        let pick = rng.gen_range(0..pool.len());
        chosen.push(pool.swap_remove(pick));
    }
    chosen.sort();

    let mut out = *scene;
    for slot in chosen {
        match slot {
            EditSlot::Subject => {
                let mut excluded = [out.subject_id, out.object_id];
                excluded.sort();
                out.subject_id = draw_excluding(rng, cfg.v_obj, &excluded);
            }
            EditSlot::Object => {
                let mut excluded = [out.object_id, out.subject_id];
                excluded.sort();
                out.object_id = draw_excluding(rng, cfg.v_obj, &excluded);
            }
            EditSlot::Attribute => {
                out.attribute_id = draw_excluding(rng, cfg.v_att, &[out.attribute_id]);
            }
            EditSlot::Relation => {
                out.relation_id = draw_excluding(rng, cfg.v_rel, &[out.relation_id]);
            }
        }
    }
    Ok(out)
}

/// Number of slots on which two scenes disagree.
pub fn slot_distance(a: &Scene, b: &Scene) -> usize {
    usize::from(a.subject_id != b.subject_id)
        + usize::from(a.object_id != b.object_id)
        + usize::from(a.attribute_id != b.attribute_id)
        + usize::from(a.relation_id != b.relation_id)
}

impl Scene {
    /// Indices of the four hot coordinates in the one-hot encoding.
    pub fn onehot_indices(&self, cfg: &WorldConfig) -> [usize; 4] {
        [
            self.subject_id,
            cfg.v_obj + self.object_id,
            2 * cfg.v_obj + self.attribute_id,
            2 * cfg.v_obj + cfg.v_att + self.relation_id,
        ]
    }

    /// Dense one-hot encoding of the scene.
    pub fn onehot(&self, cfg: &WorldConfig) -> Vec<f64> {
        let mut v = vec![0.0; cfg.semantic_dim()];
        for idx in self.onehot_indices(cfg) {
            v[idx] = 1.0;
        }
        v
    }
}

/// Uniform draw from `0..n` excluding the given sorted, distinct values.
fn draw_excluding(rng: &mut ChaCha8Rng, n: usize, excluded_sorted: &[usize]) -> usize {
    debug_assert!(excluded_sorted.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(n > excluded_sorted.len());
    let mut v = rng.gen_range(0..n - excluded_sorted.len());
    for &e in excluded_sorted {
        if v >= e {
            v += 1;
        }
    }
    v
}

/// Linear render plus isotropic Gaussian noise.
fn render(
    map: &Matrix,
    scene: &Scene,
    cfg: &WorldConfig,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let hot = scene.onehot_indices(cfg);
    let mut out = Vec::with_capacity(map.rows());
    for i in 0..map.rows() {
        let row = map.row(i);
        let signal: f64 = hot.iter().map(|&c| row[c]).sum();
        let noise: f64 = rng.sample(StandardNormal);
        out.push(signal + sigma * noise);
    }
    out
}

/// Draws a `rows x cols` standard Gaussian matrix, retrying until it has
/// full column rank.
fn draw_full_rank_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Matrix, WorldError> {
    for _ in 0..MAX_MAP_DRAWS {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = rng.sample(StandardNormal);
        }
        if has_full_column_rank(&m) {
            return Ok(m);
        }
    }
    Err(WorldError::DegenerateMaps(MAX_MAP_DRAWS))
}

/// Full-column-rank test via pivoted-tolerance Cholesky of the Gram matrix.
fn has_full_column_rank(m: &Matrix) -> bool {
    let gram = m
        .transpose()
        .matmul(m)
        .expect("transpose dimensions always agree");
    let s = gram.rows();
    let max_diag = (0..s).map(|i| gram.get(i, i)).fold(0.0, f64::max);
    if max_diag <= 0.0 {
        return false;
    }
    let tol = max_diag * 1e-10;
    let mut l = Matrix::zeros(s, s);
    for j in 0..s {
        let mut d = gram.get(j, j);
        for k in 0..j {
            let v = l.get(j, k);
            d -= v * v;
        }
        if d <= tol {
            return false;
        }
        let pivot = d.sqrt();
        l.set(j, j, pivot);
        for i in (j + 1)..s {
            let mut v = gram.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / pivot);
        }
    }
    true
}

/// Summary statistics written alongside a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub count: u64,
    pub n_pos_corrupted: u64,
    pub n_neg_easy: u64,
    pub pos_corrupted_indices: Vec<u64>,
    pub neg_easy_indices: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    count: u64,
    d_i: usize,
    d_t: usize,
    world: WorldConfig,
}

/// Generates `count` groups (indices `0..count`) and writes them to `path`.
///
/// The file holds one JSON header line followed by a binary block of
/// little-endian 32-bit floats, groups in index order with vectors in field
/// order (the three images, then the three captions). A companion
/// `<path>.meta.json` records which groups were corrupted. Returns the meta
/// summary.
pub fn write_dataset(path: &Path, world: &World, count: u64) -> Result<DatasetMeta, WorldError> {
    let cfg = world.config();
    let header = DatasetHeader {
        version: DATASET_VERSION,
        count,
        d_i: cfg.d_i,
        d_t: cfg.d_t,
        world: cfg.clone(),
    };
    let mut writer = BufWriter::new(std::fs::File::create(path)?);
    let header_line =
        serde_json::to_string(&header).expect("dataset header serialization cannot fail");
    writer.write_all(header_line.as_bytes())?;
    writer.write_all(b"\n")?;

    let mut meta = DatasetMeta {
        count,
        n_pos_corrupted: 0,
        n_neg_easy: 0,
        pos_corrupted_indices: Vec::new(),
        neg_easy_indices: Vec::new(),
    };
    for index in 0..count {
        let group = world.group_at(index);
        for vec in [
            &group.img_r,
            &group.img_sn,
            &group.img_sp,
            &group.cap_r,
            &group.cap_sn,
            &group.cap_sp,
        ] {
            for &v in vec {
                writer.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        if group.diag_pos_corrupted {
            meta.n_pos_corrupted += 1;
            meta.pos_corrupted_indices.push(index);
        }
        if group.diag_neg_easy {
            meta.n_neg_easy += 1;
            meta.neg_easy_indices.push(index);
        }
    }
    writer.flush()?;

    let meta_path = meta_path_for(path);
    let meta_json =
        serde_json::to_string_pretty(&meta).expect("dataset meta serialization cannot fail");
    std::fs::write(meta_path, meta_json + "\n")?;
    Ok(meta)
}

/// Companion metadata path for a dataset file.
pub fn meta_path_for(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    std::path::PathBuf::from(name)
}

/// Reads a dataset file back into memory.
///
/// Vectors are widened from 32-bit storage to `f64`. The diagnostic flags
/// are not part of the binary payload and come back as `false`; consult the
/// companion meta file for corruption information.
pub fn read_dataset(path: &Path) -> Result<(WorldConfig, Vec<SampleGroup>), WorldError> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header_bytes = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        match reader.read_exact(&mut byte) {
            Ok(()) => {}
            Err(_) => {
                return Err(WorldError::CorruptHeader(
                    "file ended before the header line".into(),
                ))
            }
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 1 << 20 {
            return Err(WorldError::CorruptHeader("unterminated header line".into()));
        }
    }
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| WorldError::CorruptHeader(format!("bad header json: {e}")))?;
    if header.version != DATASET_VERSION {
        return Err(WorldError::CorruptHeader(format!(
            "unsupported version {}",
            header.version
        )));
    }
    if header.d_i != header.world.d_i || header.d_t != header.world.d_t {
        return Err(WorldError::CorruptHeader(
            "header dims disagree with embedded world config".into(),
        ));
    }

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let floats_per_group = 3 * header.d_i + 3 * header.d_t;
    let expected_bytes = header.count as usize * floats_per_group * 4;
    if payload.len() != expected_bytes {
        return Err(WorldError::CorruptHeader(format!(
            "payload holds {} bytes, header promises {expected_bytes}",
            payload.len()
        )));
    }

    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut take = |len: usize| -> Result<Vec<f64>, WorldError> {
        let v: Vec<f64> = values.by_ref().take(len).collect();
        if v.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(WorldError::CorruptHeader(
                "non-finite value in payload".into(),
            ))
        }
    };
    let mut groups = Vec::with_capacity(header.count as usize);
    for _ in 0..header.count {
        groups.push(SampleGroup {
            img_r: take(header.d_i)?,
            img_sn: take(header.d_i)?,
            img_sp: take(header.d_i)?,
            cap_r: take(header.d_t)?,
            cap_sn: take(header.d_t)?,
            cap_sp: take(header.d_t)?,
            diag_pos_corrupted: false,
            diag_neg_easy: false,
        });
    }
    Ok((header.world, groups))
}
