"""ELBO evaluation with hand-derived reverse-mode gradients.

The objective for a minibatch b of |b| = B rows out of N is

    (N/B) * [ (1/S) sum_s sum_{i in b, j} zeta(y_ij | mean_sij) ]
    - sum_l KL_inducing(l)
    - (N/B) * sum_{i in b} sum_l KL_meanfield(i, l)

where the S Monte Carlo draws are reparameterized per component (spatial
components first, in order, then the mean-field block; the draw order is
part of the determinism contract). The inducing-point KL does not decompose
over observations and is never scaled by N/B.

Gradients are accumulated by hand against the unconstrained parameterization
(log-scale positives, softplus-diagonal Cholesky factors, raw loadings).
The training path inverts each Kuu explicitly from its jittered Cholesky
factor (dpotri) and proceeds by matrix products; jitter is proportional to
the squared amplitude so that dKuu/dlog(a) = 2 Kuu holds exactly.
"""

import numpy as np
from scipy import special
from scipy.linalg import lapack

from . import transforms
from .exceptions import SingularMatrixError
from .kernels import MATERN32, chol_with_jitter, matern32_terms, pairwise_dist, sqexp_terms
from .likelihoods import (
    GAUSSIAN,
    NEGATIVE_BINOMIAL,
    POISSON,
    gaussian_terms,
    nb_terms,
    poisson_terms,
)

# sampled exponents are clipped here before exp(); gradients are masked where
# the clip binds (it never does on sane data, but inf*0 = nan must stay out)
_EXP_CLIP = 300.0

_SD_TINY = 1e-150


def _chol_inverse(L):
    """Full inverse of A = L L' from its lower Cholesky factor."""
    inv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise SingularMatrixError(f"dpotri failed with info={info}")
    return np.tril(inv) + np.tril(inv, -1).T


class ObjectiveCache:
    """Per-fit precomputations for fixed structure and data.

    Distance matrices depend only on (Z, X), which never change during a
    fit; the Poisson lgamma(y+1) row sums are draw-independent constants.
    """

    def __init__(self, model, Yt):
        sp = model.spatial
        if sp is not None:
            self.rZZ = pairwise_dist(sp.Z, sp.Z)
            self.rZX = pairwise_dist(sp.Z, model.X)
        else:
            self.rZZ = None
            self.rZX = None
        if model.spec.likelihood.family == POISSON:
            self.lgam_rows = special.gammaln(Yt + 1.0).sum(axis=1)
        else:
            self.lgam_rows = None


def _kernel_fn(kind):
    return matern32_terms if kind == MATERN32 else sqexp_terms


def elbo_and_grad(model, Yt, nu, batch, S, rng, cache=None, want_grad=True):
    """ELBO estimate (and gradients) for one minibatch and one MC seed.

    Parameters
    ----------
    model : FactorModel
    Yt : (N, J) training target (counts, or the normalized matrix for
        gaussian models).
    nu : (N,) size factors (all ones for gaussian models).
    batch : row indices or None for full batch.
    S : Monte Carlo draws per component.
    rng : numpy Generator providing the reparameterization draws.
    cache : ObjectiveCache or None (built ad hoc when missing).
    want_grad : skip the backward pass when False.

    Returns
    -------
    (elbo, grads) with grads a dict keyed like model.parameters(), or
    (elbo, None) when want_grad is False.
    """
    spec = model.spec
    nonneg = spec.nonnegative
    family = spec.likelihood.family
    if cache is None:
        cache = ObjectiveCache(model, Yt)
    N = Yt.shape[0]
    if batch is None:
        b = slice(None)
        B = N
    else:
        b = np.asarray(batch, dtype=np.intp)
        B = b.shape[0]
    Xb = model.X[b]
    Yb = np.ascontiguousarray(Yt[b])
    nub = nu[b]
    scale = N / B
    sp = model.spatial
    mf = model.meanfield
    T = model.T
    K = model.L - T

    # ---- forward: spatial components ------------------------------------
    comps = []
    Fs = None
    kl_ind = 0.0
    if T > 0:
        kfn = _kernel_fn(sp.kernel_kind)
        rZXb = cache.rZX if batch is None else cache.rZX[:, b]
        M = sp.Z.shape[0]
        Fs = np.empty((S, B, T))
        diag = np.arange(M)
        for l in range(T):
            amp2 = float(np.exp(2.0 * sp.log_amp[l]))
            ell = float(np.exp(sp.log_len[l]))
            Kuu, dKuu = kfn(cache.rZZ, amp2, ell)
            Kuf, dKuf = kfn(rZXb, amp2, ell)
            L, jit = chol_with_jitter(Kuu, scale=amp2)
            if jit:
                Kuu[diag, diag] += jit
            Kinv = _chol_inverse(L)
            A = Kinv @ Kuf
            C = transforms.omega_chol_from_raw(sp.omega_raw[l])
            R = C.T @ A
            muZ = sp.beta0[l] + sp.Z @ sp.beta1[l]
            muXb = sp.beta0[l] + Xb @ sp.beta1[l]
            d = sp.delta[l] - muZ
            mean_b = muXb + A.T @ d
            var = amp2 - np.sum(A * Kuf, axis=0) + np.sum(R * R, axis=0)
            np.maximum(var, 0.0, out=var)
            sd = np.sqrt(var)
            eps = rng.standard_normal((S, B))
            Fs[:, :, l] = mean_b[None, :] + sd[None, :] * eps
            w = Kinv @ d
            G1 = Kinv @ C
            kl_ind += 0.5 * (
                2.0 * float(np.sum(np.log(np.diag(L))))
                - 2.0 * float(np.sum(np.log(np.diag(C))))
                - M
                + float(np.sum(G1 * C))
                + float(d @ w)
            )
            if want_grad:
                comps.append(
                    dict(
                        amp2=amp2, Kuu=Kuu, dKuu=dKuu, Kuf=Kuf, dKuf=dKuf,
                        Kinv=Kinv, A=A, C=C, R=R, d=d, w=w, G1=G1,
                        sd=sd, eps=eps,
                    )
                )

    # ---- forward: mean-field block --------------------------------------
    Hs = None
    kl_mf = 0.0
    if K > 0:
        db = mf.delta[b]
        lob = mf.log_omega[b]
        om_b = np.exp(lob)
        eps_h = rng.standard_normal((S, B, K))
        Hs = db[None, :, :] + np.sqrt(om_b)[None, :, :] * eps_h
        kl_mf = float(
            transforms.kl_meanfield_matrix(db, lob, mf.prior_mean, mf.prior_log_var).sum()
        )

    # ---- assemble means and likelihood ----------------------------------
    J = model.J
    if nonneg:
        if T > 0:
            clipF = np.clip(Fs, -_EXP_CLIP, _EXP_CLIP)
            PF = np.exp(clipF)
        if K > 0:
            clipH = np.clip(Hs, -_EXP_CLIP, _EXP_CLIP)
            PH = np.exp(clipH)
        lam = np.zeros((S, B, J))
        if T > 0:
            lam += PF @ model.W.T
        if K > 0:
            lam += PH @ model.V.T
        mean = nub[None, :, None] * lam
    else:
        mean = np.zeros((S, B, J))
        if T > 0:
            mean += Fs @ model.W.T
        if K > 0:
            mean += Hs @ model.V.T

    if family == POISSON:
        ll, dmean = poisson_terms(Yb, mean)
        ll -= S * float(cache.lgam_rows[b].sum())
        daux = None
    elif family == NEGATIVE_BINOMIAL:
        phi = np.exp(model.log_aux)
        ll, dmean, daux = nb_terms(Yb, mean, phi)
    else:
        sigma2 = np.exp(model.log_aux)
        ll, dmean, daux = gaussian_terms(Yb, mean, sigma2)

    elbo = scale * ll / S - kl_ind - scale * kl_mf
    if not want_grad:
        return elbo, None

    # ---- backward --------------------------------------------------------
    grads = {name: np.zeros_like(arr) for name, arr in model.parameters().items()}
    gmean = dmean * (scale / S)

    if family == NEGATIVE_BINOMIAL:
        grads["log_aux"] = daux * phi * (scale / S)
    elif family == GAUSSIAN:
        grads["log_aux"] = daux * (scale / S)

    if nonneg:
        glam = gmean * nub[None, :, None]
        glam_r = glam.reshape(S * B, J)
        if T > 0:
            grads["W"] = glam_r.T @ PF.reshape(S * B, T)
            gF = (glam @ model.W) * PF
            gF[np.abs(Fs) >= _EXP_CLIP] = 0.0
        if K > 0:
            grads["V"] = glam_r.T @ PH.reshape(S * B, K)
            gH = (glam @ model.V) * PH
            gH[np.abs(Hs) >= _EXP_CLIP] = 0.0
    else:
        gmean_r = gmean.reshape(S * B, J)
        if T > 0:
            grads["W"] = gmean_r.T @ Fs.reshape(S * B, T)
            gF = gmean @ model.W
        if K > 0:
            grads["V"] = gmean_r.T @ Hs.reshape(S * B, K)
            gH = gmean @ model.V

    if K > 0:
        gdelta_b = gH.sum(axis=0)
        glogom_b = (gH * eps_h).sum(axis=0) * (0.5 * np.sqrt(om_b))
        s2 = np.exp(mf.prior_log_var)[None, :]
        dd = db - mf.prior_mean[None, :]
        gdelta_b -= scale * dd / s2
        glogom_b -= scale * 0.5 * (om_b / s2 - 1.0)
        grads["mf.delta"][b] = gdelta_b
        grads["mf.log_omega"][b] = glogom_b
        grads["mf.prior_mean"] = scale * (dd / s2).sum(axis=0)
        grads["mf.prior_log_var"] = -scale * 0.5 * (
            1.0 - (om_b + dd * dd) / s2
        ).sum(axis=0)

    for l in range(T):
        c = comps[l]
        gF_l = gF[:, :, l]
        gmu = gF_l.sum(axis=0)
        inv2sd = np.where(c["sd"] > _SD_TINY, 0.5 / np.maximum(c["sd"], _SD_TINY), 0.0)
        gvar = (gF_l * c["eps"]).sum(axis=0) * inv2sd
        gR = c["R"] * (2.0 * gvar)[None, :]
        gA = c["C"] @ gR - c["Kuf"] * gvar[None, :] + np.outer(c["d"], gmu)
        gC = c["A"] @ gR.T
        T1 = c["Kinv"] @ gA
        gKuf = T1 - c["A"] * gvar[None, :]
        gKuu = -(T1 @ c["A"].T)
        gd_all = c["A"] @ gmu - c["w"]
        # KL adjoints, subtracted from the ELBO
        gKuu -= 0.5 * (c["Kinv"] - c["G1"] @ c["G1"].T - np.outer(c["w"], c["w"]))
        gC_kl = np.tril(c["G1"])
        dC = np.diag(c["C"]).copy()
        idx = np.arange(dC.shape[0])
        gC_kl[idx, idx] -= 1.0 / dC
        gC_total = gC - gC_kl
        raw_diag = sp.omega_raw[l][idx, idx]
        graw = np.tril(gC_total, -1)
        graw[idx, idx] = np.diag(gC_total) * transforms.sigmoid(raw_diag)
        grads["sp.omega_raw"][l] = graw
        grads["sp.delta"][l] = gd_all
        grads["sp.beta0"][l] = gmu.sum() - gd_all.sum()
        grads["sp.beta1"][l] = Xb.T @ gmu - sp.Z.T @ gd_all
        grads["sp.log_amp"][l] = (
            2.0 * c["amp2"] * gvar.sum()
            + 2.0 * float(np.sum(gKuu * c["Kuu"]))
            + 2.0 * float(np.sum(gKuf * c["Kuf"]))
        )
        grads["sp.log_len"][l] = float(np.sum(gKuu * c["dKuu"])) + float(
            np.sum(gKuf * c["dKuf"])
        )

    return elbo, grads
