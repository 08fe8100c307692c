import numpy as np
import pytest
import torch

from capo import envsim
from capo.envsim import DomainFactor, generate_scene


@pytest.fixture(scope="session")
def reference_factor():
    return DomainFactor.reference()


@pytest.fixture(scope="session")
def small_scene():
    rng = np.random.Generator(np.random.PCG64(1234))
    return generate_scene(rng, width=11, height=11, wall_segments=2)


@pytest.fixture(scope="session")
def scene_batch():
    rng = np.random.Generator(np.random.PCG64(99))
    return [generate_scene(rng, width=w, height=h, wall_segments=s)
            for w, h, s in [(9, 9, 1), (11, 11, 2), (12, 12, 2)]]


@pytest.fixture(scope="session")
def rendered_frames(small_scene, reference_factor):
    """A small stack of real rendered observations from distinct poses."""
    rng = np.random.Generator(np.random.PCG64(7))
    frames = []
    for _ in range(8):
        goal = int(rng.integers(0, envsim.NUM_CATEGORIES))
        agent = envsim.sample_start(rng, small_scene, reference_factor, goal)
        frames.append(envsim.render(small_scene, agent, reference_factor))
    return np.stack(frames)


def fd_gradient_worst_error(loss_fn, params, n_coords, seed, h=1e-6):
    """Central-difference oracle: worst relative error across sampled coords.

    loss_fn must be a pure function of the params (same batches, same seeded
    noise/augmentation per call); stop-gradient branches must be held fixed.
    """
    coord_rng = np.random.Generator(np.random.PCG64(seed))
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    sizes = [p.numel() for p in params]
    worst = 0.0
    for _ in range(n_coords):
        flat = int(coord_rng.integers(0, sum(sizes)))
        pi = 0
        while flat >= sizes[pi]:
            flat -= sizes[pi]
            pi += 1
        p = params[pi]
        with torch.no_grad():
            orig = p.view(-1)[flat].item()
            p.view(-1)[flat] = orig + h
            lp = float(loss_fn())
            p.view(-1)[flat] = orig - h
            lm = float(loss_fn())
            p.view(-1)[flat] = orig
        fd = (lp - lm) / (2 * h)
        an = float(grads[pi].view(-1)[flat])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-10))
    return worst
