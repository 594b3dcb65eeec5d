use rand::Rng;

use acd_tensor::{ParamBuilder, Tape, Tensor, Var};

use crate::attention::{AttnConfig, Isab, Mab, Pma};
use crate::error::Result;

/// One clusterwise step: an anchor, the points that may join it and which
/// of them do.
#[derive(Clone, Debug, PartialEq)]
pub struct Round {
    pub anchor: usize,
    pub available: Vec<usize>,
    pub bits: Vec<bool>,
}

impl Round {
    /// The cluster formed in this round, sorted.
    pub fn members(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self
            .available
            .iter()
            .zip(&self.bits)
            .filter(|(_, &b)| b)
            .map(|(&i, _)| i)
            .chain(std::iter::once(self.anchor))
            .collect();
        m.sort_unstable();
        m
    }

    pub fn n_available(&self) -> usize {
        self.available.len()
    }
}

/// Attention encodings of one round shared by the attention CCP and DAC:
/// `ū = ISAB[u(x_d), u(x_a)]`, `D = ū_d`, `U = PMA(MAB(ū_a, ū_d))`.
#[derive(Clone, Debug)]
pub struct AttnRoundEncoder {
    pub isab: Isab,
    pub mab_u: Mab,
    pub pma_u: Pma,
    pub dim: usize,
}

/// `D`, `U` and the per-point codes `ū_a` of one round.
pub struct RoundCodes {
    pub d: Var,
    pub u: Var,
    pub ua: Option<Var>,
}

impl AttnRoundEncoder {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, d_in: usize, cfg: &AttnConfig) -> Result<Self> {
        Ok(Self {
            isab: Isab::new(&mut pb.sub("isab"), d_in, cfg)?,
            mab_u: Mab::new(&mut pb.sub("mab_u"), cfg.dim, cfg.dim, cfg)?,
            pma_u: Pma::new(&mut pb.sub("pma_u"), cfg.dim, cfg)?,
            dim: cfg.dim,
        })
    }

    /// `ux` holds `u(x_i)` for every node. With no available points `U` is
    /// the zero vector.
    pub fn encode(&self, tape: &mut Tape<'_>, ux: Var, anchor: usize, available: &[usize]) -> Result<RoundCodes> {
        let mut idx = Vec::with_capacity(available.len() + 1);
        idx.push(anchor);
        idx.extend_from_slice(available);
        let rows = tape.gather_rows(ux, &idx)?;
        let ubar = self.isab.forward(tape, rows)?;
        let d = tape.slice(ubar, 0, 0, 1)?;
        if available.is_empty() {
            let u = tape.constant(Tensor::zeros(&[1, self.dim]));
            return Ok(RoundCodes { d, u, ua: None });
        }
        let ua = tape.slice(ubar, 0, 1, idx.len())?;
        let m = self.mab_u.forward(tape, ua, d)?;
        let u = self.pma_u.forward(tape, m)?;
        Ok(RoundCodes { d, u, ua: Some(ua) })
    }
}
