//! Graph builders and the value-level inference API.

use crate::geometry::Point;
use crate::phantom::NUM_PARTS;
use crate::tensor::nn::{attention_block, fourier_posemb, layer_norm, linear};
use crate::tensor::{Graph, Segment, Tensor, Var};

use super::{Branch, LatentSet, MaskVector, ModelError, Provenance, Result, VecHeart};

/// Per-part code nodes from one encoder call; `None` where no points were
/// given.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub codes: [Option<Var>; NUM_PARTS],
}

/// Query points grouped by part, part-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeBatch {
    pub points: Vec<Point>,
    pub counts: [usize; NUM_PARTS],
}

impl DecodeBatch {
    pub fn per_part(groups: &[Vec<Point>]) -> Self {
        let mut b = DecodeBatch::default();
        for (p, g) in groups.iter().enumerate().take(NUM_PARTS) {
            b.points.extend_from_slice(g);
            b.counts[p] = g.len();
        }
        b
    }

    /// The same points for every part (`N_q × 5` layout after decoding).
    pub fn shared(points: &[Point]) -> Self {
        let mut b = DecodeBatch::default();
        for p in 0..NUM_PARTS {
            b.points.extend_from_slice(points);
            b.counts[p] = points.len();
        }
        b
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// First row of each part.
    pub fn offsets(&self) -> [usize; NUM_PARTS] {
        let mut o = [0; NUM_PARTS];
        for p in 1..NUM_PARTS {
            o[p] = o[p - 1] + self.counts[p - 1];
        }
        o
    }
}

/// Rows decoded per graph at inference time.
const DECODE_CHUNK: usize = 4096;

impl VecHeart {
    /// Cross-attention from the branch's queries to the embedded points of
    /// every non-empty cloud, all parts in one fused block.
    pub fn g_encode(&self, g: &mut Graph, branch: Branch, clouds: &[&[Point]]) -> Result<Encoded> {
        if clouds.len() != NUM_PARTS {
            return Err(ModelError::Config(format!("{} clouds, expected {NUM_PARTS}", clouds.len())));
        }
        if branch == Branch::Slice && !self.config.slice_branch {
            return Err(ModelError::NoSliceBranch);
        }
        let m = self.config.num_queries;
        let present: Vec<usize> = (0..NUM_PARTS).filter(|&p| !clouds[p].is_empty()).collect();
        let mut codes = [None; NUM_PARTS];
        if present.is_empty() {
            return Ok(Encoded { codes });
        }
        let queries = present
            .iter()
            .map(|&p| g.param(&self.params, &branch.query(p)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let x = if queries.len() == 1 { queries[0] } else { g.concat_rows(&queries)? };
        let points: Vec<Point> = present.iter().flat_map(|&p| clouds[p].iter().copied()).collect();
        let ctx = fourier_posemb(g, &self.params, "posemb", &points)?;
        let counts: Vec<usize> = present.iter().map(|&p| clouds[p].len()).collect();
        let segs = Segment::blocks(&vec![m; present.len()], &counts);
        let y = attention_block(g, &self.params, branch.encoder(), x, Some(ctx), &segs, &self.attention())?;
        for (i, &p) in present.iter().enumerate() {
            codes[p] = Some(if present.len() == 1 { y } else { g.slice_rows(y, i * m, m)? });
        }
        Ok(Encoded { codes })
    }

    /// `D_p`: the encoded code, or the branch query when the part is masked
    /// or had no input. Returns the `P·M × D` token matrix.
    pub fn g_assemble(
        &self,
        g: &mut Graph,
        branch: Branch,
        enc: &Encoded,
        mask: &MaskVector,
    ) -> Result<(Var, [Provenance; NUM_PARTS])> {
        let observed = match branch {
            Branch::Surface => Provenance::Surface,
            Branch::Slice => Provenance::Slice,
        };
        let mut rows = Vec::with_capacity(NUM_PARTS);
        let mut prov = [Provenance::QuerySubstituted; NUM_PARTS];
        for p in 0..NUM_PARTS {
            match enc.codes[p] {
                Some(c) if !mask.is_masked(p) => {
                    rows.push(c);
                    prov[p] = observed;
                }
                _ => rows.push(g.param(&self.params, &branch.query(p))?),
            }
        }
        Ok((g.concat_rows(&rows)?, prov))
    }

    /// Encode the unmasked parts and substitute queries for the rest.
    pub fn g_latents(
        &self,
        g: &mut Graph,
        branch: Branch,
        clouds: &[&[Point]],
        mask: &MaskVector,
    ) -> Result<(Var, [Provenance; NUM_PARTS])> {
        let visible: Vec<&[Point]> = (0..NUM_PARTS)
            .map(|p| if mask.is_masked(p) { &[][..] } else { clouds[p] })
            .collect();
        let enc = self.g_encode(g, branch, &visible)?;
        self.g_assemble(g, branch, &enc, mask)
    }

    /// `L` rounds of per-part self-attention followed by attention over all
    /// `P·M` tokens.
    pub fn g_hpt(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let m = self.config.num_queries;
        let att = self.attention();
        let intra = Segment::blocks(&[m; NUM_PARTS], &[m; NUM_PARTS]);
        let inter = [Segment::full(NUM_PARTS * m, NUM_PARTS * m)];
        let mut x = tokens;
        for l in 0..self.config.layers {
            x = attention_block(g, &self.params, &format!("hpt.{l}.intra"), x, None, &intra, &att)?;
            if self.config.inter_attention {
                x = attention_block(g, &self.params, &format!("hpt.{l}.inter"), x, None, &inter, &att)?;
            }
        }
        Ok(x)
    }

    /// Cross-attention from embedded query points to their part's tokens,
    /// then the scalar head. Output is `batch.len() × 1`.
    pub fn g_decode(&self, g: &mut Graph, tokens: Var, batch: &DecodeBatch) -> Result<Var> {
        if batch.is_empty() {
            return Err(ModelError::Empty("query batch".into()));
        }
        let m = self.config.num_queries;
        let offsets = batch.offsets();
        let segs: Vec<Segment> = (0..NUM_PARTS)
            .filter(|&p| batch.counts[p] > 0)
            .map(|p| Segment {
                q_start: offsets[p],
                q_len: batch.counts[p],
                k_start: p * m,
                k_len: m,
            })
            .collect();
        let e = fourier_posemb(g, &self.params, "posemb", &batch.points)?;
        let y = attention_block(g, &self.params, "dec", e, Some(tokens), &segs, &self.attention())?;
        let h = layer_norm(g, &self.params, "head.ln", y)?;
        let h = linear(g, &self.params, "head1", h)?;
        let h = g.gelu(h);
        Ok(linear(g, &self.params, "head2", h)?)
    }

    fn tokens_leaf(&self, g: &mut Graph, latents: &LatentSet) -> Result<Var> {
        latents.validate(&self.config)?;
        let rows = NUM_PARTS * self.config.num_queries;
        Ok(g.constant([rows, self.config.dim], latents.flatten())?)
    }

    /// `C_p` for one surface point cloud.
    pub fn encode_part(&self, points: &[Point], p: usize) -> Result<Tensor<f32>> {
        self.encode_one(Branch::Surface, points, p)
    }

    /// `C_{p,s}`; an empty cloud yields `L_{p,s}` itself.
    pub fn encode_slices(&self, points: &[Point], p: usize) -> Result<(Tensor<f32>, Provenance)> {
        if !self.config.slice_branch {
            return Err(ModelError::NoSliceBranch);
        }
        if p >= NUM_PARTS {
            return Err(ModelError::PartIndex(p));
        }
        if points.is_empty() {
            let q = &self.params.get(&Branch::Slice.query(p)).expect("slice queries exist").tensor;
            return Ok((q.clone().with_requires_grad(false), Provenance::QuerySubstituted));
        }
        Ok((self.encode_one(Branch::Slice, points, p)?, Provenance::Slice))
    }

    fn encode_one(&self, branch: Branch, points: &[Point], p: usize) -> Result<Tensor<f32>> {
        if p >= NUM_PARTS {
            return Err(ModelError::PartIndex(p));
        }
        if points.is_empty() {
            return Err(ModelError::Empty("point cloud".into()));
        }
        let mut clouds: [&[Point]; NUM_PARTS] = [&[]; NUM_PARTS];
        clouds[p] = points;
        let mut g = Graph::new();
        let enc = self.g_encode(&mut g, branch, &clouds)?;
        let v = enc.codes[p].expect("non-empty cloud was encoded");
        Ok(g.tensor(v).with_requires_grad(false))
    }

    /// Encode every part (masked parts are not encoded) and apply the mask.
    pub fn latents(&self, branch: Branch, clouds: &[&[Point]], mask: &MaskVector) -> Result<LatentSet> {
        let mut g = Graph::new();
        let (tokens, provenance) = self.g_latents(&mut g, branch, clouds, mask)?;
        LatentSet::from_flat(g.value(tokens), &self.config, provenance)
    }

    /// `D_p = (1 − M_p) C_p + M_p L_p`. Unmasked codes are copied untouched.
    pub fn acm_apply(&self, latents: &LatentSet, mask: &MaskVector) -> Result<LatentSet> {
        latents.validate(&self.config)?;
        let mut out = latents.clone();
        for p in 0..NUM_PARTS {
            if mask.is_masked(p) {
                let q = &self.params.get(&Branch::Surface.query(p)).expect("queries exist").tensor;
                out.codes[p] = q.clone().with_requires_grad(false);
                out.provenance[p] = Provenance::QuerySubstituted;
            }
        }
        Ok(out)
    }

    pub fn hpt_stack(&self, latents: &LatentSet) -> Result<LatentSet> {
        let mut g = Graph::new();
        let t = self.tokens_leaf(&mut g, latents)?;
        let y = self.g_hpt(&mut g, t)?;
        LatentSet::from_flat(g.value(y), &self.config, latents.provenance)
    }

    /// Predicted SDF of every part at every query, `N_q × 5`, from latents
    /// that went through [`VecHeart::hpt_stack`].
    pub fn decode_sdf(&self, processed: &LatentSet, queries: &[Point]) -> Result<Vec<[f64; NUM_PARTS]>> {
        if queries.is_empty() {
            return Err(ModelError::Empty("query batch".into()));
        }
        let mut out = vec![[0.0; NUM_PARTS]; queries.len()];
        for p in 0..NUM_PARTS {
            for (i, v) in self.decode_part(processed, p, queries)?.into_iter().enumerate() {
                out[i][p] = v;
            }
        }
        Ok(out)
    }

    /// Predicted SDF of part `p` only.
    pub fn decode_part(&self, processed: &LatentSet, p: usize, queries: &[Point]) -> Result<Vec<f64>> {
        if p >= NUM_PARTS {
            return Err(ModelError::PartIndex(p));
        }
        if queries.is_empty() {
            return Err(ModelError::Empty("query batch".into()));
        }
        let flat = processed.flatten();
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(DECODE_CHUNK) {
            let mut g = Graph::new();
            let rows = NUM_PARTS * self.config.num_queries;
            let t = g.constant([rows, self.config.dim], flat.clone())?;
            let mut groups = vec![Vec::new(); NUM_PARTS];
            groups[p] = chunk.to_vec();
            let y = self.g_decode(&mut g, t, &DecodeBatch::per_part(&groups))?;
            g.check_finite(y, "decoded sdf")?;
            out.extend(g.value(y).iter().map(|&v| v as f64));
        }
        Ok(out)
    }

    /// Encode → mask → part transformer, ready for decoding.
    pub fn process(&self, branch: Branch, clouds: &[&[Point]], mask: &MaskVector) -> Result<LatentSet> {
        let l = self.latents(branch, clouds, mask)?;
        self.hpt_stack(&l)
    }

    /// The whole pipeline on `N_q` shared query points.
    pub fn forward_full(
        &self,
        branch: Branch,
        clouds: &[&[Point]],
        mask: &MaskVector,
        queries: &[Point],
    ) -> Result<Vec<[f64; NUM_PARTS]>> {
        let processed = self.process(branch, clouds, mask)?;
        self.decode_sdf(&processed, queries)
    }
}
