'''
Export a .p3dm morphable model to the Basel-style HDF5 layout.

    python scripts/model_to_hdf5.py out/model/model.p3dm out/model/model.h5
'''
import os, sys
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from morphkit import morphable


if __name__ == '__main__':
    if len(sys.argv) != 3:
        sys.exit(f'usage: {sys.argv[0]} <model.p3dm> <model.h5>')
    model = morphable.load_model(sys.argv[1])
    path = morphable.export_hdf5(model, sys.argv[2])
    print(f'Wrote {path}: {model.n_vertices} vertices, '
          f'{model.k_shape} shape / {model.k_expression} expression components')
