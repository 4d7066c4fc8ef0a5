'''
Reference lookups: capture views, landmark convention, face parts, expression catalogue and subject attributes.
'''
import numpy as np

# ============= Capture views =============
# camera azimuth (degrees) around the vertical axis; +x is the subject's left
VIEWS = ('left', 'middle', 'right')
VIEW_AZIMUTH = {'left': 45.0, 'middle': 0.0, 'right': -45.0}
PIVOT_VIEW = 'middle'

# ============= Landmark convention =============
# (semantic id, azimuth, elevation) in radians on the unit head sphere, face looking along +z
FACE_LANDMARKS = [
    ('right_brow', -0.42, 0.44),
    ('left_brow', 0.42, 0.44),
    ('right_eye_outer', -0.62, 0.22),
    ('right_eye_center', -0.40, 0.22),
    ('right_eye_inner', -0.20, 0.22),
    ('left_eye_inner', 0.20, 0.22),
    ('left_eye_center', 0.40, 0.22),
    ('left_eye_outer', 0.62, 0.22),
    ('nose_bridge', 0.0, 0.26),
    ('nose_tip', 0.0, 0.0),
    ('nose_right', -0.17, -0.10),
    ('nose_left', 0.17, -0.10),
    ('mouth_right', -0.30, -0.44),
    ('mouth_upper', 0.0, -0.36),
    ('mouth_left', 0.30, -0.44),
    ('mouth_lower', 0.0, -0.54),
    ('chin', 0.0, -0.86),
]
JAWLINE_SPAN = (-1.25, 1.25)    # azimuth range of the jawline contour
JAWLINE_ELEVATION = -0.62
DEFAULT_JAWLINE_COUNT = 9

LEFT_EYE = 'left_eye_center'
RIGHT_EYE = 'right_eye_center'
NOSE_TIP = 'nose_tip'


def jawline_landmarks(n_jawline=DEFAULT_JAWLINE_COUNT):
    azimuths = np.linspace(JAWLINE_SPAN[0], JAWLINE_SPAN[1], n_jawline) if n_jawline > 1 else [0.0]
    return [(f'jaw_{k:02d}', float(a), JAWLINE_ELEVATION) for k, a in enumerate(azimuths)]


def landmark_directions(n_jawline=DEFAULT_JAWLINE_COUNT):
    '''Ordered (semantic id, azimuth, elevation) of the synthetic landmark convention'''
    return FACE_LANDMARKS + jawline_landmarks(n_jawline)


# ============= Face parts =============
# stiffness trade-off weight per part, on the unit-normalized template
FACE_PART_LAMBDA = {
    'cheek': 1.0,
    'forehead': 1.0,
    'nose': 5.0,
    'eyes': 5.0,
    'mouth': 3.0,
    'boundary': 10.0,
}
FACE_PARTS = tuple(FACE_PART_LAMBDA)

# ============= Expressions =============
EXPRESSION_CATEGORIES = ('neutral', 'positive', 'negative')

EXPRESSIONS = [
    ('neutral', 'neutral'),
    ('smile', 'positive'),
    ('frown', 'negative'),
    ('mouth_open', 'positive'),
    ('sad', 'negative'),
    ('brow_raise', 'positive'),
    ('eyes_closed', 'neutral'),
    ('anger', 'negative'),
    ('grin', 'positive'),
    ('lips_pressed', 'neutral'),
    ('disgust', 'negative'),
    ('laugh', 'positive'),
    ('mouth_left', 'neutral'),
    ('fear', 'negative'),
    ('surprise', 'positive'),
    ('mouth_right', 'neutral'),
    ('sneer', 'negative'),
    ('cheek_puff', 'positive'),
    ('jaw_left', 'neutral'),
    ('kiss', 'positive'),
    ('jaw_right', 'neutral'),
    ('pout', 'neutral'),
]
EXPRESSION_CATEGORY = dict(EXPRESSIONS)

# ============= Subject attributes =============
GENDERS = ('F', 'M')
AGE_RANGE = (18, 80)
AGE_BANDS = [(18, 30, '18-30'), (31, 45, '31-45'), (46, 60, '46-60'), (61, 80, '61-80')]

TRAIN_FRACTION = 0.75


def age_band(age):
    for low, high, name in AGE_BANDS:
        if low <= age <= high:
            return name
    return 'N/A'


# ============= Expression displacement fields =============
# localized radial bumps (azimuth, elevation, width) in radians; amplitudes in units of EXPRESSION_UNIT
EXPRESSION_UNIT = 0.04
EXPRESSION_BASES = {
    'mouth_left': (0.30, -0.44, 0.22),
    'mouth_right': (-0.30, -0.44, 0.22),
    'upper_lip': (0.0, -0.36, 0.16),
    'lower_lip': (0.0, -0.54, 0.16),
    'brow_left': (0.42, 0.44, 0.24),
    'brow_right': (-0.42, 0.44, 0.24),
    'jaw': (0.0, -0.85, 0.40),
    'cheek_left': (0.50, -0.15, 0.26),
    'cheek_right': (-0.50, -0.15, 0.26),
}
EXPRESSION_WEIGHTS = {
    'neutral': {},
    'smile': {'mouth_left': 1.0, 'mouth_right': 1.0, 'cheek_left': 0.5, 'cheek_right': 0.5},
    'frown': {'brow_left': -1.0, 'brow_right': -1.0, 'mouth_left': -0.5, 'mouth_right': -0.5},
    'mouth_open': {'jaw': -1.0, 'lower_lip': -1.0},
    'sad': {'mouth_left': -1.0, 'mouth_right': -1.0, 'brow_left': 0.3, 'brow_right': 0.3},
    'brow_raise': {'brow_left': 1.0, 'brow_right': 1.0},
    'eyes_closed': {'brow_left': -0.3, 'brow_right': -0.3, 'cheek_left': 0.2, 'cheek_right': 0.2},
    'anger': {'brow_left': -1.0, 'brow_right': -1.0, 'upper_lip': 0.5},
    'grin': {'mouth_left': 1.0, 'mouth_right': 1.0, 'upper_lip': 0.5, 'lower_lip': 0.5},
    'lips_pressed': {'upper_lip': -0.7, 'lower_lip': -0.7},
    'disgust': {'upper_lip': 1.0, 'brow_left': -0.5, 'brow_right': -0.5},
    'laugh': {'mouth_left': 1.0, 'mouth_right': 1.0, 'jaw': -1.0, 'cheek_left': 0.7, 'cheek_right': 0.7},
    'mouth_left': {'mouth_left': 1.0, 'mouth_right': -0.5},
    'fear': {'brow_left': 1.0, 'brow_right': 1.0, 'jaw': -0.5},
    'surprise': {'brow_left': 1.0, 'brow_right': 1.0, 'jaw': -1.0},
    'mouth_right': {'mouth_right': 1.0, 'mouth_left': -0.5},
    'sneer': {'upper_lip': 1.0, 'mouth_left': 0.5},
    'cheek_puff': {'cheek_left': 1.0, 'cheek_right': 1.0},
    'jaw_left': {'jaw': -0.5, 'mouth_left': 0.5, 'cheek_left': 0.3},
    'kiss': {'upper_lip': 1.0, 'lower_lip': 1.0, 'mouth_left': -1.0, 'mouth_right': -1.0},
    'jaw_right': {'jaw': -0.5, 'mouth_right': 0.5, 'cheek_right': 0.3},
    'pout': {'lower_lip': 1.0, 'upper_lip': 0.5},
}
