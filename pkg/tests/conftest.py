"""Shared fixtures: synthetic surveys and fitted models, built once per session.

The model fits are the expensive part of the suite, so every flavor is fit
once here and reused by the fidelity and epidemic acceptance tests.
"""

from __future__ import annotations

import numpy as np
import pytest

from contactnet.common import N_AGE
from contactnet.gmm import fit_age_stratified, log_transform
from contactnet.networks import build_contact_matrix

import synthdata

SURVEY_SEED = 2026
SURVEY_SIZE = 600
FIT_SEED = 404
DESK_SPLITS = 20

FLAVORS = ("lockdown2020", "lockdown2021", "reopen", "polymod")
COMIX_FLAVORS = ("lockdown2020", "lockdown2021", "reopen")


@pytest.fixture(scope="session")
def surveys():
    """flavor -> (vectors, report) for the shared synthetic snapshots."""
    return {
        flavor: synthdata.survey_vectors(flavor, SURVEY_SIZE, SURVEY_SEED)
        for flavor in FLAVORS
    }


def _hists_ages(vectors):
    hists = np.stack([v.counts for v in vectors])
    ages = np.array([v.owner_age for v in vectors], dtype=np.int64)
    return hists, ages


@pytest.fixture(scope="session")
def survey_arrays(surveys):
    """flavor -> (hists45, age_hists9, ages)."""
    out = {}
    for flavor, (vectors, _) in surveys.items():
        hists, ages = _hists_ages(vectors)
        out[flavor] = (hists, hists.reshape(-1, N_AGE, 5).sum(axis=2), ages)
    return out


@pytest.fixture(scope="session")
def gmm_models(survey_arrays):
    """flavor -> FittedModels at desk-scale split count."""
    fitted = {}
    for flavor, (hists, _, ages) in survey_arrays.items():
        by_age = {
            a: log_transform(hists[ages == a].astype(float))
            for a in range(N_AGE)
            if (ages == a).sum()
        }
        fitted[flavor] = fit_age_stratified(by_age, FIT_SEED, splits=DESK_SPLITS)
    return fitted


@pytest.fixture(scope="session")
def sbm_matrices(surveys):
    """flavor -> ContactMatrix from the same surveys."""
    return {
        flavor: build_contact_matrix(vectors)
        for flavor, (vectors, _) in surveys.items()
    }


@pytest.fixture(scope="session")
def census():
    return synthdata.CENSUS.copy()
