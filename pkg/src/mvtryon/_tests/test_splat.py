import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mvtryon.camera import (
    Camera,
    CameraExtrinsics,
    CameraIntrinsics,
    rig_from_azimuths,
    uniform_rig,
)
from mvtryon.exceptions import (
    FormatError,
    InvalidParameterError,
    ShapeError,
)
from mvtryon.splat import (
    FitConfig,
    Gaussian,
    GaussianCloud,
    SplatConfig,
    covariance_from_scale_rot,
    fit_cloud,
    init_cloud_from_scene,
    load_cloud,
    project_gaussian,
    quaternion_to_rotation,
    render,
    render_grad,
    rotate_cloud,
    save_cloud,
    view_losses,
)
from mvtryon.synthdata import make_scene


def frontal_camera(width=8, height=8, focal=10.0, distance=2.0):
    return Camera(
        CameraIntrinsics.centered(width, height, focal),
        CameraExtrinsics(np.eye(3), [0.0, 0.0, distance]),
    )


def random_cloud(rng, n, spread=0.3):
    quat = rng.normal(size=(n, 4))
    return GaussianCloud(
        rng.uniform(-spread, spread, (n, 3)),
        rng.uniform(0.05, 0.15, (n, 3)),
        quat / np.linalg.norm(quat, axis=1, keepdims=True),
        rng.uniform(0.2, 0.9, n),
        rng.uniform(0.0, 1.0, (n, 3)),
    )


def numpy_rotation(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [
                w * w + x * x - y * y - z * z,
                2 * (x * y - w * z),
                2 * (x * z + w * y),
            ],
            [
                2 * (x * y + w * z),
                w * w - x * x + y * y - z * z,
                2 * (y * z - w * x),
            ],
            [
                2 * (x * z - w * y),
                2 * (y * z + w * x),
                w * w - x * x - y * y + z * z,
            ],
        ]
    )


def oracle_render(cloud, camera, config):
    """Per-pixel front to back compositing with plain numpy loops."""
    k = camera.intrinsics
    R, t = camera.R, camera.t
    splats = []
    for i in range(cloud.count):
        mu = cloud.mu[i].numpy()
        x, y, z = R @ mu + t
        if z <= config.near:
            continue
        J = np.array(
            [
                [k.fx / z, 0.0, -k.fx * x / z**2],
                [0.0, k.fy / z, -k.fy * y / z**2],
            ]
        )
        Q = numpy_rotation(cloud.quat[i].numpy())
        world = Q @ np.diag(cloud.scale[i].numpy() ** 2) @ Q.T
        cov = J @ R @ world @ R.T @ J.T + config.blur * np.eye(2)
        center = np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])
        splats.append((z, i, center, np.linalg.inv(cov)))
    splats.sort(key=lambda s: (s[0], s[1]))

    image = np.zeros((k.height, k.width, 3))
    for v in range(k.height):
        for u in range(k.width):
            transmittance = 1.0
            for _, i, center, precision in splats:
                d = np.array([u, v]) - center
                q = d @ precision @ d
                if config.support_sigma is not None:
                    if q > config.support_sigma**2:
                        continue
                a = float(cloud.opacity[i]) * math.exp(-0.5 * q)
                image[v, u] += transmittance * a * cloud.color[i].numpy()
                transmittance *= 1 - a
    return image


def test_covariance_examples():
    identity = torch.tensor([1.0, 0.0, 0.0, 0.0])
    sigma = covariance_from_scale_rot(torch.tensor([1.0, 2.0, 3.0]), identity)
    assert torch.equal(sigma, torch.diag(torch.tensor([1.0, 4.0, 9.0])))

    half = math.sqrt(0.5)
    about_z = torch.tensor([half, 0.0, 0.0, half])
    sigma = covariance_from_scale_rot(torch.tensor([1.0, 2.0, 3.0]), about_z)
    torch.testing.assert_close(
        sigma, torch.diag(torch.tensor([4.0, 1.0, 9.0])), rtol=0, atol=1e-12
    )
    # quaternions are normalized before use
    torch.testing.assert_close(
        covariance_from_scale_rot(torch.tensor([1.0, 2.0, 3.0]), 3 * about_z),
        sigma,
    )
    with pytest.raises(InvalidParameterError):
        quaternion_to_rotation(torch.zeros(4))


def test_covariance_spectrum(rng):
    cloud = random_cloud(rng, 10)
    sigma = covariance_from_scale_rot(cloud.scale, cloud.quat)
    torch.testing.assert_close(sigma, sigma.transpose(-1, -2))
    eigenvalues = torch.linalg.eigvalsh(sigma)
    expected = torch.sort(cloud.scale**2, dim=-1).values
    torch.testing.assert_close(eigenvalues, expected, rtol=0, atol=1e-12)


def test_gaussian_validation():
    good = dict(
        mu=[0.0, 0.0, 0.0],
        scale=[0.1, 0.1, 0.1],
        quat=[1.0, 0.0, 0.0, 0.0],
        opacity=0.5,
        color=[0.2, 0.3, 0.4],
    )
    Gaussian(**good)
    for key, value in (
        ("quat", [1.0, 0.1, 0.0, 0.0]),
        ("scale", [0.1, 0.0, 0.1]),
        ("opacity", 1.5),
        ("color", [0.2, 1.3, 0.4]),
    ):
        with pytest.raises(InvalidParameterError):
            Gaussian(**{**good, key: value})
    with pytest.raises(ShapeError):
        Gaussian(**{**good, "mu": [0.0, 0.0]})


def test_project_gaussian():
    camera = frontal_camera()
    gaussian = Gaussian(
        [0.0, 0.0, 0.0], [0.1, 0.1, 0.1], [1.0, 0, 0, 0], 0.5, [1.0, 0.5, 0.0]
    )
    projected = project_gaussian(gaussian, camera)
    torch.testing.assert_close(projected.mu2d, torch.tensor([4.0, 4.0]))
    # (f / z * scale)^2 plus the screen space blur
    torch.testing.assert_close(
        projected.sigma2d, torch.diag(torch.tensor([0.55, 0.55]))
    )
    assert projected.depth == 2.0

    behind = Gaussian(
        [0.0, 0.0, -3.0], [0.1, 0.1, 0.1], [1.0, 0, 0, 0], 0.5, [1.0, 0, 0]
    )
    assert project_gaussian(behind, camera) is None


def test_render_single_gaussian():
    camera = frontal_camera()
    cloud = GaussianCloud.from_gaussians(
        [
            Gaussian(
                [0.0, 0.0, 0.0],
                [0.1, 0.1, 0.1],
                [1.0, 0, 0, 0],
                0.5,
                [1.0, 0.5, 0.0],
            )
        ]
    )
    out = render(cloud, camera)
    assert out.image.shape == (8, 8, 3)
    assert out.image[4, 4].tolist() == [0.5, 0.25, 0.0]
    assert out.alpha[4, 4].item() == 0.5
    # outside the 3 sigma support
    assert torch.count_nonzero(out.image[0, 0]) == 0
    assert out.alpha[0, 0].item() == 0.0


def test_render_empty_and_culled():
    camera = frontal_camera()
    out = render(GaussianCloud.empty(), camera)
    assert out.image.shape == (8, 8, 3)
    assert torch.count_nonzero(out.image) == 0
    behind = GaussianCloud(
        [[0.0, 0.0, -3.0]], [[0.1] * 3], [[1.0, 0, 0, 0]], [1.0], [[1.0] * 3]
    )
    assert torch.count_nonzero(render(behind, camera).image) == 0


def test_front_gaussian_occludes():
    camera = frontal_camera()

    def cloud(red_z, blue_z):
        return GaussianCloud(
            [[0.0, 0.0, red_z], [0.0, 0.0, blue_z]],
            [[0.1] * 3] * 2,
            [[1.0, 0, 0, 0]] * 2,
            [1.0, 1.0],
            [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        )

    assert render(cloud(-0.5, 0.0), camera).image[4, 4].tolist() == [
        1.0,
        0.0,
        0.0,
    ]
    assert render(cloud(0.0, -0.5), camera).image[4, 4].tolist() == [
        0.0,
        0.0,
        1.0,
    ]


@pytest.mark.parametrize("support", [3.0, None])
def test_render_matches_numpy_oracle(rng, support):
    config = SplatConfig(support_sigma=support)
    cloud = random_cloud(rng, 5)
    rig = uniform_rig(3, 2.0, 0.2, CameraIntrinsics.centered(10, 12, 14.0))
    camera = rig[1]
    image = render(cloud, camera, config).image.numpy()
    np.testing.assert_allclose(
        image, oracle_render(cloud, camera, config), rtol=0, atol=1e-12
    )


@settings(max_examples=15, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(1, 32),
    st.integers(4, 64),
    st.integers(4, 64),
    st.floats(0.0, 2 * math.pi),
)
def test_random_scenes_match_numpy_oracle(seed, n, width, height, azimuth):
    rng = np.random.default_rng(seed)
    config = SplatConfig()
    cloud = random_cloud(rng, n)
    intrinsics = CameraIntrinsics.centered(width, height, 1.2 * width)
    camera = rig_from_azimuths([azimuth], 2.0, 0.2, intrinsics)[0]
    out = render(cloud, camera, config)
    np.testing.assert_allclose(
        out.image.numpy(),
        oracle_render(cloud, camera, config),
        rtol=0,
        atol=1e-9,
    )

    transmittance = out.transmittance
    assert transmittance.shape == (len(out.order), height, width)
    assert torch.all(transmittance[0] == 1)
    assert torch.all(transmittance[1:] <= transmittance[:-1])
    assert torch.all(transmittance >= 0)
    assert torch.all((out.alpha >= 0) & (out.alpha <= 1))


def test_render_is_permutation_invariant(rng):
    cloud = random_cloud(rng, 8)
    camera = frontal_camera(12, 12, 16.0)
    permuted = cloud.select(rng.permutation(8))
    torch.testing.assert_close(
        render(cloud, camera).image,
        render(permuted, camera).image,
        rtol=0,
        atol=1e-14,
    )


def test_render_is_rigid_invariant(rng):
    cloud = random_cloud(rng, 6)
    rig = uniform_rig(4, 2.0, 0.1, CameraIntrinsics.centered(12, 12, 16.0))
    camera = rig[2]
    quat = rng.normal(size=4)
    quat /= np.linalg.norm(quat)
    Q = quaternion_to_rotation(torch.as_tensor(quat)).numpy()
    moved = Camera(
        camera.intrinsics, CameraExtrinsics(camera.R @ Q.T, camera.t)
    )
    torch.testing.assert_close(
        render(rotate_cloud(cloud, quat), moved).image,
        render(cloud, camera).image,
        rtol=0,
        atol=1e-10,
    )


def test_render_gradcheck(rng):
    config = SplatConfig(support_sigma=None)
    cloud = random_cloud(rng, 2)
    camera = frontal_camera(6, 6, 8.0)
    inputs = tuple(t.clone().requires_grad_(True) for t in cloud.tensors())

    def image(*tensors):
        return render(GaussianCloud(*tensors), camera, config).image

    assert torch.autograd.gradcheck(image, inputs)


def test_render_grad_matches_finite_differences(rng):
    config = SplatConfig(support_sigma=None)
    cloud = random_cloud(rng, 3)
    camera = frontal_camera(8, 8, 10.0)
    upstream = torch.as_tensor(rng.normal(size=(8, 8, 3)))
    grads = render_grad(cloud, camera, upstream, config).as_dict()

    def objective(tensors):
        image = render(GaussianCloud(*tensors), camera, config).image
        return float(torch.sum(upstream * image))

    step = 1e-6
    for name, base in zip(GaussianCloud.fields, cloud.tensors()):
        direction = torch.as_tensor(rng.normal(size=tuple(base.shape)))
        plus = [
            t + step * direction if f == name else t
            for f, t in zip(GaussianCloud.fields, cloud.tensors())
        ]
        minus = [
            t - step * direction if f == name else t
            for f, t in zip(GaussianCloud.fields, cloud.tensors())
        ]
        numeric = (objective(plus) - objective(minus)) / (2 * step)
        analytic = float(torch.sum(grads[name] * direction))
        assert numeric == pytest.approx(analytic, rel=1e-5, abs=1e-8), name


def test_render_grad_edge_cases(rng):
    cloud = random_cloud(rng, 3)
    camera = frontal_camera()
    grads = render_grad(cloud, camera, torch.zeros(8, 8, 3))
    for value in grads.as_dict().values():
        assert torch.count_nonzero(value) == 0
    with pytest.raises(ShapeError):
        render_grad(cloud, camera, torch.zeros(8, 8))
    empty = render_grad(GaussianCloud.empty(), camera, torch.ones(8, 8, 3))
    assert empty.mu.shape == (0, 3)


def test_cloud_file_round_trip(rng, tmp_path):
    cloud = random_cloud(rng, 7)
    path = tmp_path / "cloud.gspl"
    save_cloud(path, cloud)
    assert load_cloud(path).equal(cloud)

    save_cloud(path, GaussianCloud.empty())
    assert load_cloud(path).count == 0

    save_cloud(path, cloud)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_cloud(path)
    path.write_bytes(b"JUNK")
    with pytest.raises(FormatError):
        load_cloud(path)


def test_init_cloud_from_scene():
    scene = make_scene(4, "checker")
    cloud = init_cloud_from_scene(scene, n_azimuth=12, n_height=6, seed=1)
    assert cloud.count == 72
    cloud.check()
    points = cloud.mu.numpy()
    np.testing.assert_allclose(scene.sdf(points), 0.0, atol=1e-9)

    # the flat axis of every Gaussian on the cylinder follows the normal
    body = np.abs(points[:, 1]) <= scene.half_length
    axes = quaternion_to_rotation(cloud.quat).numpy()[:, :, 2]
    np.testing.assert_allclose(
        axes[body], scene.normal(points[body]), atol=1e-12
    )

    again = init_cloud_from_scene(scene, n_azimuth=12, n_height=6, seed=1)
    assert again.equal(cloud)
    with pytest.raises(InvalidParameterError):
        init_cloud_from_scene(scene, n_azimuth=0)


@pytest.fixture
def fit_targets(rng):
    truth = random_cloud(rng, 6)
    rig = uniform_rig(4, 2.5, 0.0, CameraIntrinsics.centered(16, 16, 24.0))
    with torch.no_grad():
        targets = [
            (render(truth, camera).image.numpy(), camera) for camera in rig
        ]
    return truth, targets


def test_fit_from_truth_has_zero_loss(fit_targets):
    truth, targets = fit_targets
    result = fit_cloud(targets, truth, iters=0, lr=0.01, seed=0)
    assert result.view_losses == [0.0] * 4
    assert result.losses == []
    assert result.cloud.equal(truth)


def test_fit_with_zero_lr_keeps_init(fit_targets, rng):
    truth, targets = fit_targets
    init = random_cloud(rng, 6)
    result = fit_cloud(targets, init, iters=5, lr=0.0, seed=0)
    assert result.cloud.equal(init)
    assert result.view_losses == view_losses(init, targets)


def test_fit_reduces_loss(fit_targets):
    truth, targets = fit_targets
    init = GaussianCloud(
        truth.mu,
        truth.scale,
        truth.quat,
        truth.opacity,
        0.5 * torch.ones(6, 3),
    )
    before = np.mean(view_losses(init, targets))
    result = fit_cloud(
        targets, init, iters=60, lr=0.05, seed=0, config=FitConfig()
    )
    assert np.mean(result.view_losses) < before
    assert len(result.losses) == 60
    result.cloud.check()
    torch.testing.assert_close(
        result.cloud.quat.norm(dim=-1), torch.ones(6), rtol=0, atol=1e-12
    )


def test_fit_rejects_bad_targets(fit_targets):
    truth, targets = fit_targets
    with pytest.raises(InvalidParameterError):
        fit_cloud([], truth, 1, 0.01, 0)
    with pytest.raises(InvalidParameterError):
        fit_cloud(targets[:1], truth, 1, 0.01, 0)
    bad = [(np.zeros((4, 4, 3)), camera) for _, camera in targets]
    with pytest.raises(ShapeError):
        fit_cloud(bad, truth, 1, 0.01, 0)


@pytest.mark.slow
def test_fit_reconstructs_a_perturbed_cloud():
    rng = np.random.default_rng(8)
    truth = random_cloud(rng, 8)
    rig = uniform_rig(8, 2.5, 0.2, CameraIntrinsics.centered(32, 32, 48.0))
    with torch.no_grad():
        targets = [
            (render(truth, camera).image.numpy(), camera) for camera in rig
        ]
    init = GaussianCloud(
        truth.mu + 0.02 * torch.as_tensor(rng.normal(size=(8, 3))),
        truth.scale,
        truth.quat,
        truth.opacity,
        0.5 * (truth.color + 0.5),
    )
    before = np.mean(view_losses(init, targets))
    result = fit_cloud(targets, init, iters=2000, lr=0.01, seed=0)
    after = np.mean(result.view_losses)
    assert after < before and after < 1e-3
