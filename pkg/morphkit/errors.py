'''
Exceptions raised across the morphkit pipeline.
'''


class MorphkitError(Exception):
    '''Base class of every error raised by morphkit'''
    pass


class ParameterError(MorphkitError, ValueError):
    '''Raise when a numeric parameter is outside its admissible range'''
    def __init__(self, name, value, msg=None):
        if msg is None:
            msg = f'Invalid value for {name}: {value!r}'
        super().__init__(msg)
        self.name = name
        self.value = value


class MeshFormatError(MorphkitError):
    '''Raise when a mesh / point cloud file does not parse under its declared format'''
    def __init__(self, path, location, msg=None):
        if msg is None:
            msg = f'Malformed file {path} at {location}'
        super().__init__(msg)
        self.path = path
        self.location = location


class MeshValidationError(MorphkitError, ValueError):
    '''Raise when geometry violates a TriMesh / PointCloud invariant'''
    pass


class IndexOutOfRangeError(MeshValidationError):
    '''Raise when a face references a vertex that does not exist'''
    def __init__(self, index, n_vertices, msg=None):
        if msg is None:
            msg = f'Face index {index} out of range for {n_vertices} vertices'
        super().__init__(msg)
        self.index = index
        self.n_vertices = n_vertices


class EmptySetError(MorphkitError):
    '''Raise when a query runs against an empty point set'''
    pass


class DegenerateInputError(MorphkitError):
    '''Raise when geometry is too degenerate for the requested computation'''
    pass


class DegenerateConfigurationError(DegenerateInputError):
    '''Raise when correspondences cannot determine a transform (too few, collinear, coincident)'''
    def __init__(self, n_points, msg=None):
        if msg is None:
            msg = f'Degenerate configuration of {n_points} correspondences'
        super().__init__(msg)
        self.n_points = n_points


class SchemeMismatchError(MorphkitError):
    '''Raise when two landmark sets follow different landmark conventions'''
    def __init__(self, expected, actual, msg=None):
        if msg is None:
            msg = f'Landmark scheme mismatch: expected {expected}, got {actual}'
        super().__init__(msg)
        self.expected = expected
        self.actual = actual


class MissingLandmarkError(MorphkitError, KeyError):
    '''Raise when a landmark set lacks a landmark the computation needs'''
    def __init__(self, landmark_id, scheme, msg=None):
        if msg is None:
            msg = f'Landmark {landmark_id} not in set ({scheme})'
        super().__init__(msg)
        self.landmark_id = landmark_id
        self.scheme = scheme

    def __str__(self):
        return self.args[0]


class NoCorrespondenceError(MorphkitError):
    '''Raise when every correspondence of an ICP iteration is rejected'''
    def __init__(self, iteration, msg=None):
        if msg is None:
            msg = f'All correspondences rejected at iteration {iteration}'
        super().__init__(msg)
        self.iteration = iteration


class NicpSolverError(MorphkitError):
    '''Raise when the NICP normal equations are singular for a face part'''
    def __init__(self, part, msg=None):
        if msg is None:
            msg = f'Singular NICP system: part "{part}" is not constrained by the stiffness graph'
        super().__init__(msg)
        self.part = part


class EmptyProjectionError(MorphkitError):
    '''Raise when no vertex projects inside the camera image'''
    pass


class EmptyCropError(MorphkitError):
    '''Raise when cropping around the nose tip leaves nothing to evaluate'''
    def __init__(self, radius, msg=None):
        if msg is None:
            msg = f'Crop at radius {radius} leaves an empty mesh'
        super().__init__(msg)
        self.radius = radius


class DataError(MorphkitError):
    '''Raise when a training set cannot produce a model'''
    def __init__(self, subject=None, msg=None):
        if msg is None:
            msg = f'Invalid training data for subject: {subject}'
        super().__init__(msg)
        self.subject = subject


class ConfigError(MorphkitError):
    '''Raise when the pipeline configuration or the command line is invalid'''
    pass


class MissingInputError(MorphkitError):
    '''Raise when a stage input is absent on disk'''
    def __init__(self, path, msg=None):
        if msg is None:
            msg = f'Missing input: {path}'
        super().__init__(msg)
        self.path = path


class StageError(MorphkitError):
    '''Raise when a pipeline stage fails'''
    def __init__(self, stage, msg=None):
        if msg is None:
            msg = f'Stage failed: {stage}'
        super().__init__(msg)
        self.stage = stage
