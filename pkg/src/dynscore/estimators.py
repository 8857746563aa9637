"""scikit-learn style estimators around the degradation chain, denoiser
pretraining and the distillation loop."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import distill, nets
from ._validation import check_labels, check_paired, check_patches, check_samples, check_seed, check_timesteps
from .degrade import DegradationConfig, degrade
from .oracle import GaussianMixture, sample
from .rng import stream
from .schedule import build_vp_schedule
from .trainer import denoising_loss, lr_factor, train_denoiser

__all__ = ["Degrader", "TeacherDenoiser", "ScoreDistiller"]


class Degrader(TransformerMixin, BaseEstimator):
    """Blur, downsample, add noise and JPEG-like compress grayscale patches.

    Parameters
    ----------
    blur_sigma, kernel_radius, downsample_factor, noise_sigma, jpeg_quality, second_order
        See :class:`~dynscore.degrade.DegradationConfig`.
    random_state : int, default=0
        Seed of the per-item noise streams. Item ``i`` of a call uses index
        ``start_index + i``, so results do not depend on batch composition.
    start_index : int, default=0
    """

    def __init__(
        self,
        blur_sigma=1.0,
        kernel_radius=3,
        downsample_factor=2,
        noise_sigma=0.05,
        jpeg_quality=50,
        second_order=False,
        random_state=0,
        start_index=0,
    ):
        self.blur_sigma = blur_sigma
        self.kernel_radius = kernel_radius
        self.downsample_factor = downsample_factor
        self.noise_sigma = noise_sigma
        self.jpeg_quality = jpeg_quality
        self.second_order = second_order
        self.random_state = random_state
        self.start_index = start_index

    def fit(self, X, y=None):
        P, _ = check_patches(X)
        self.config_ = DegradationConfig(
            blur_sigma=self.blur_sigma,
            kernel_radius=self.kernel_radius,
            downsample_factor=self.downsample_factor,
            noise_sigma=self.noise_sigma,
            jpeg_quality=self.jpeg_quality,
            rng_seed=check_seed(self.random_state),
            second_order=self.second_order,
        )
        self.patch_shape_ = P.shape[1:]
        self.n_features_in_ = int(np.prod(self.patch_shape_))
        return self

    def transform(self, X):
        """Degrade each patch; flat input gives flat output."""
        check_is_fitted(self, "config_")
        P, flat = check_patches(X, self.patch_shape_)
        if P.shape[1:] != self.patch_shape_:
            raise ValueError(f"patches of shape {P.shape[1:]} but fitted on {self.patch_shape_}")
        out = np.stack([degrade(p, self.config_, index=self.start_index + i) for i, p in enumerate(P)])
        return out.reshape(len(out), -1) if flat else out


def _schedule(est):
    return build_vp_schedule(est.num_timesteps, est.beta_min, est.beta_max, weight_kind=est.weight_kind)


class TeacherDenoiser(BaseEstimator):
    """Noise-prediction network trained with the denoising objective.

    ``fit(X, y)`` learns ``eps(x_t, t, y)`` for data rows ``X`` and optional
    integer labels ``y``; the label ``n_labels`` is reserved as the null
    condition when ``cond_embed_dim > 0``.

    Attributes
    ----------
    spec_ : NetSpec
    params_ : ndarray
    schedule_ : NoiseSchedule
    train_loss_ : float
        Denoising loss on the training rows after fitting (fixed draws).
    """

    def __init__(
        self,
        hidden_dims=(128, 128),
        activation="silu",
        time_embed_dim=16,
        cond_embed_dim=0,
        n_labels=1,
        input_scale=1.0,
        n_steps=8000,
        batch_size=256,
        learning_rate=1e-3,
        label_dropout=0.1,
        num_timesteps=1000,
        beta_min=1e-4,
        beta_max=0.02,
        weight_kind="constant",
        random_state=0,
    ):
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.time_embed_dim = time_embed_dim
        self.cond_embed_dim = cond_embed_dim
        self.n_labels = n_labels
        self.input_scale = input_scale
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.label_dropout = label_dropout
        self.num_timesteps = num_timesteps
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.weight_kind = weight_kind
        self.random_state = random_state

    def _make_spec(self, D):
        return nets.NetSpec(
            input_dim=D,
            hidden_dims=tuple(self.hidden_dims),
            output_dim=D,
            activation=self.activation,
            time_embed_dim=self.time_embed_dim,
            cond_embed_dim=self.cond_embed_dim,
            num_labels=self.n_labels + 1 if self.cond_embed_dim else 1,
            time_period=float(self.num_timesteps),
        )

    def fit(self, X, y=None):
        X = check_samples(X)
        labels = check_labels(y, X.shape[0], self.n_labels)
        seed = check_seed(self.random_state)
        self.schedule_ = _schedule(self)
        self.spec_ = self._make_spec(X.shape[1])
        params = nets.init_params(self.spec_, stream(seed, "teacher-init"))

        def draw(n, rng):
            idx = rng.integers(0, X.shape[0], n)
            return X[idx], labels[idx]

        self.params_ = train_denoiser(
            self.spec_,
            params,
            draw,
            self.schedule_,
            stream(seed, "teacher-train"),
            steps=self.n_steps,
            batch_size=self.batch_size,
            lr=self.learning_rate,
            input_scale=self.input_scale,
            label_dropout=self.label_dropout,
            null_label=self.n_labels,
        )
        self.n_features_in_ = X.shape[1]
        self.train_loss_ = -self.score(X, y)
        return self

    def predict(self, X_t, t, y=None):
        """Predicted noise ``eps(x_t, t, y)``."""
        check_is_fitted(self, "params_")
        X_t = check_samples(X_t, "X_t", self.n_features_in_)
        t = check_timesteps(t, X_t.shape[0], self.num_timesteps)
        labels = check_labels(y, X_t.shape[0], self.n_labels + 1)
        return nets.forward(self.spec_, self.params_, self.input_scale * X_t, t, labels)

    def denoise(self, X_t, t, y=None):
        """Clean estimate ``(x_t - sigma_t eps) / alpha_t`` implied by the noise prediction."""
        eps = self.predict(X_t, t, y)
        t = check_timesteps(t, eps.shape[0], self.num_timesteps)
        s = self.schedule_
        return (np.asarray(X_t, dtype=np.float64).reshape(eps.shape) - s.sigmas[t][:, None] * eps) / s.alphas[t][:, None]

    def score_function(self, X_t, t, y=None):
        """Approximate ``grad log p_t(x_t) = -eps / sigma_t``."""
        eps = self.predict(X_t, t, y)
        t = check_timesteps(t, eps.shape[0], self.num_timesteps)
        return -eps / self.schedule_.sigmas[t][:, None]

    def score(self, X, y=None):
        """Negative denoising loss on ``X`` with draws fixed by ``random_state``."""
        check_is_fitted(self, "params_")
        X = check_samples(X, n_features=self.n_features_in_)
        labels = check_labels(y, X.shape[0], self.n_labels + 1)
        rng = stream(check_seed(self.random_state), "teacher-score")
        t = rng.integers(1, self.num_timesteps + 1, X.shape[0])
        eps = rng.standard_normal(X.shape)
        loss, _ = denoising_loss(self.spec_, self.params_, X, t, labels, eps, self.schedule_, self.input_scale)
        return -loss

    def as_teacher(self):
        check_is_fitted(self, "params_")
        return distill.NetworkTeacher(self.spec_, self.params_, self.input_scale)


class ScoreDistiller(BaseEstimator):
    """One-step generator ``G(lq (+) z, y)`` trained by dynamic score distillation.

    ``fit(X, y)`` takes degraded inputs ``X`` and paired clean targets
    ``y``. The teacher is either a :class:`~dynscore.oracle.GaussianMixture`
    (exact scores) or a fitted :class:`TeacherDenoiser`.

    Parameters
    ----------
    teacher : GaussianMixture or TeacherDenoiser
    kappa, lam : float
        Noise-range control factor and KL weight.
    dynamic : bool
        When False, ``T_max = T`` and the loss ratio is ``fixed_alpha``.
    fake_init : {"teacher", "random"}
        ``"teacher"`` copies a network teacher of the same architecture;
        when none matches, the fake network is pretrained on samples of a
        mixture teacher or on the clean targets ``y``. ``"random"`` starts
        from a fresh initialisation.

    Attributes
    ----------
    state_ : DistillState
    history_ : list of StepReport
    """

    def __init__(
        self,
        teacher=None,
        hidden_dims=(64, 64),
        activation="silu",
        cond_embed_dim=0,
        n_labels=1,
        z_dim=2,
        kappa=1.5,
        lam=1.0,
        dynamic=True,
        fixed_alpha=0.5,
        n_steps=5000,
        batch_size=32,
        learning_rate=1e-3,
        lr_schedule="cosine",
        lr_floor=0.05,
        weight_decay=1e-2,
        fake_hidden_dims=(128, 128),
        fake_time_embed_dim=16,
        fake_init="teacher",
        fake_pretrain_steps=8000,
        fake_updates=3,
        fake_t_range="dynamic",
        in_scale=1.0,
        out_scale=1.0,
        fake_in_scale=1.0,
        skip="identity",
        skip_factor=1,
        distance_norm="sum",
        num_timesteps=1000,
        beta_min=1e-4,
        beta_max=0.02,
        weight_kind="constant",
        random_state=0,
    ):
        self.teacher = teacher
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.cond_embed_dim = cond_embed_dim
        self.n_labels = n_labels
        self.z_dim = z_dim
        self.kappa = kappa
        self.lam = lam
        self.dynamic = dynamic
        self.fixed_alpha = fixed_alpha
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.lr_floor = lr_floor
        self.weight_decay = weight_decay
        self.fake_hidden_dims = fake_hidden_dims
        self.fake_time_embed_dim = fake_time_embed_dim
        self.fake_init = fake_init
        self.fake_pretrain_steps = fake_pretrain_steps
        self.fake_updates = fake_updates
        self.fake_t_range = fake_t_range
        self.in_scale = in_scale
        self.out_scale = out_scale
        self.fake_in_scale = fake_in_scale
        self.skip = skip
        self.skip_factor = skip_factor
        self.distance_norm = distance_norm
        self.num_timesteps = num_timesteps
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.weight_kind = weight_kind
        self.random_state = random_state

    def _distill_config(self):
        return distill.DistillConfig(
            kappa=self.kappa,
            lam=self.lam,
            dynamic=self.dynamic,
            fixed_alpha=self.fixed_alpha,
            z_dim=self.z_dim,
            skip=self.skip,
            skip_factor=self.skip_factor,
            gen_in_scale=self.in_scale,
            gen_out_scale=self.out_scale,
            fake_in_scale=self.fake_in_scale,
            fake_t_range=self.fake_t_range,
            distance_norm=self.distance_norm,
            lr_gen=self.learning_rate,
            lr_fake=self.learning_rate,
            weight_decay=self.weight_decay,
            fake_updates=self.fake_updates,
        )

    def _resolve_teacher(self, D):
        if isinstance(self.teacher, GaussianMixture):
            if self.teacher.dim != D:
                raise ValueError(f"teacher dimension {self.teacher.dim} does not match targets ({D})")
            return distill.OracleTeacher(self.teacher)
        if isinstance(self.teacher, TeacherDenoiser):
            return self.teacher.as_teacher()
        raise TypeError("teacher must be a GaussianMixture or a fitted TeacherDenoiser")

    def _init_fake(self, teacher, D, seed, hq, labels):
        fake = TeacherDenoiser(
            hidden_dims=self.fake_hidden_dims,
            time_embed_dim=self.fake_time_embed_dim,
            activation=self.activation,
            n_labels=self.n_labels,
            input_scale=self.fake_in_scale,
            n_steps=self.fake_pretrain_steps,
            num_timesteps=self.num_timesteps,
            beta_min=self.beta_min,
            beta_max=self.beta_max,
            random_state=seed,
        )
        spec = fake._make_spec(D)
        if self.fake_init == "random":
            return spec, nets.init_params(spec, stream(seed, "init-fake"))
        if self.fake_init != "teacher":
            raise ValueError("fake_init must be 'teacher' or 'random'")
        if isinstance(teacher, distill.NetworkTeacher) and teacher.spec == spec and teacher.input_scale == self.fake_in_scale:
            return spec, np.array(teacher.params)
        # pretrain a teacher-equivalent network on target-distributed data
        if isinstance(self.teacher, GaussianMixture):
            data = sample(self.teacher, max(65536, hq.shape[0]), stream(seed, "fake-pretrain-data"))
            fake.fit(data)
        else:
            fake.fit(hq, labels if self.cond_embed_dim else None)
        return fake.spec_, fake.params_

    def fit(self, X, y, labels=None):
        """Train on degraded inputs ``X`` paired with clean targets ``y``."""
        X, Y = check_paired(X, y)
        labels = check_labels(labels, X.shape[0], self.n_labels)
        seed = check_seed(self.random_state)
        s = _schedule(self)
        cfg = self._distill_config()
        D = Y.shape[1]
        teacher = self._resolve_teacher(D)
        gspec = nets.NetSpec(
            input_dim=X.shape[1] + self.z_dim,
            hidden_dims=tuple(self.hidden_dims),
            output_dim=D,
            activation=self.activation,
            cond_embed_dim=self.cond_embed_dim,
            num_labels=self.n_labels + 1 if self.cond_embed_dim else 1,
        )
        gparams = nets.init_params(gspec, stream(seed, "init-gen"), zero_output=True)
        fspec, fparams = self._init_fake(teacher, D, seed, Y, labels)
        state = distill.init_state(gspec, gparams, fspec, fparams, teacher, s, cfg)
        state.config.null_label_index = self.n_labels

        rng = stream(seed, "data")
        streams = distill.TrainStreams.from_seed(seed)
        history = []
        B = self.batch_size
        for i in range(self.n_steps):
            f = lr_factor(self, i, self.n_steps)
            state.opt_gen.lr = cfg.lr_gen * f
            state.opt_fake.lr = cfg.lr_fake * f
            idx = rng.integers(0, X.shape[0], B)
            batch = distill.Batch(Y[idx], X[idx], labels[idx], rng.standard_normal((B, self.z_dim)))
            history.append(distill.train_step(state, batch, streams))
        self.state_ = state
        self.history_ = history
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, labels=None, random_state=None):
        """Generate one output per row of ``X`` with fresh ``z``."""
        check_is_fitted(self, "state_")
        X = check_samples(X, n_features=self.n_features_in_)
        labels = check_labels(labels, X.shape[0], self.n_labels + 1)
        seed = check_seed(self.random_state if random_state is None else random_state)
        z = stream(seed, "predict-z").standard_normal((X.shape[0], self.z_dim))
        batch = distill.Batch(np.zeros((X.shape[0], 0)), X, labels, z)
        return distill.generate(self.state_, batch)
