import numpy as np
import pytest

from morphkit.errors import MeshValidationError, MissingLandmarkError, SchemeMismatchError, MissingInputError
from morphkit.landmarks import LandmarkScheme, LandmarkSet, build_synthetic_scheme
from morphkit.fusion import RigidTransform
from morphkit import reference


def test_synthetic_scheme_declares_designated_landmarks(scheme):
    assert len(scheme.ids) == len(reference.FACE_LANDMARKS) + reference.DEFAULT_JAWLINE_COUNT
    for designated in (scheme.left_eye, scheme.right_eye, scheme.nose_tip):
        assert designated in scheme.ids
    assert build_synthetic_scheme(5).name != scheme.name


def test_scheme_without_nose_tip():
    with pytest.raises(MeshValidationError):
        LandmarkScheme('broken', (reference.LEFT_EYE, reference.RIGHT_EYE))


def test_unknown_and_duplicate_ids(scheme):
    with pytest.raises(MeshValidationError):
        LandmarkSet(('not_a_landmark',), np.zeros((1, 3)), scheme)
    with pytest.raises(MeshValidationError):
        LandmarkSet((scheme.nose_tip, scheme.nose_tip), np.zeros((2, 3)), scheme)
    with pytest.raises(MeshValidationError):
        LandmarkSet((scheme.nose_tip,), np.zeros((2, 3)), scheme)


def test_matched_follows_scheme_order(scheme):
    a = LandmarkSet((scheme.nose_tip, scheme.left_eye), [[0, 0, 1], [1, 0, 0]], scheme)
    b = LandmarkSet((scheme.right_eye, scheme.left_eye, scheme.nose_tip), [[2, 0, 0], [3, 0, 0], [4, 0, 0]], scheme)
    ids, mine, theirs = a.matched(b)
    assert ids == [i for i in scheme.ids if i in (scheme.nose_tip, scheme.left_eye)]
    assert np.allclose(mine[ids.index(scheme.nose_tip)], [0, 0, 1])
    assert np.allclose(theirs[ids.index(scheme.left_eye)], [3, 0, 0])


def test_missing_landmark(scheme):
    a = LandmarkSet((scheme.nose_tip,), [[0, 0, 1]], scheme)
    with pytest.raises(MissingLandmarkError) as e:
        a.position(scheme.left_eye)
    assert e.value.landmark_id == scheme.left_eye
    assert e.value.scheme == scheme.name


def test_matched_across_schemes(scheme):
    other = build_synthetic_scheme(3)
    a = LandmarkSet((scheme.nose_tip,), np.zeros((1, 3)), scheme)
    b = LandmarkSet((other.nose_tip,), np.zeros((1, 3)), other)
    with pytest.raises(SchemeMismatchError):
        a.matched(b)


def test_augmented_adds_only_missing(scheme):
    a = LandmarkSet((scheme.nose_tip,), [[0, 0, 1]], scheme)
    b = LandmarkSet((scheme.left_eye, scheme.nose_tip), [[1, 0, 0], [9, 9, 9]], scheme)
    both = a.augmented(b)
    assert set(both.ids) == {scheme.nose_tip, scheme.left_eye}
    assert np.allclose(both.position(scheme.nose_tip), [0, 0, 1])


def test_from_vertices_and_transform(scheme, sphere):
    ids = (scheme.left_eye, scheme.right_eye, scheme.nose_tip)
    lms = LandmarkSet.from_vertices(sphere.vertices, [3, 7, 11], ids, scheme)
    assert np.array_equal(lms.positions, sphere.vertices[[3, 7, 11]])
    moved = lms.transformed(RigidTransform(translation=np.array([1.0, 2.0, 3.0])))
    assert np.allclose(moved.positions, lms.positions + [1, 2, 3])
    assert np.array_equal(moved.vertex_indices, [3, 7, 11])


def test_landmark_file(tmp_path, scheme, rng):
    lms = LandmarkSet(scheme.ids, rng.normal(size=(len(scheme.ids), 3)), scheme, np.arange(len(scheme.ids)))
    loaded = LandmarkSet.load(lms.save(tmp_path / 'lms.json'))
    assert loaded.ids == lms.ids
    assert loaded.scheme == scheme
    assert np.array_equal(loaded.positions, lms.positions)
    assert np.array_equal(loaded.vertex_indices, lms.vertex_indices)
    with pytest.raises(MissingInputError):
        LandmarkSet.load(tmp_path / 'absent.json')
