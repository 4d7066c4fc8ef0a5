import os, sys
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from morphkit import cli


settings = ['--out', os.environ.get('MORPHKIT_OUT', 'out')]
if os.path.exists('morphkit_conf.json'):
    settings += ['--config', 'morphkit_conf.json']


def populate(stage):
    status = cli.main([stage, *settings])
    if status:
        sys.exit(status)


# ============= Acquisition =============
# -- Synthetic population, multi-view scans and template
populate('synth')
# -- 2D -> 3D landmarks, multi-view fusion
populate('fuse')

# ============= Modeling =============
# -- Coarse + non-rigid registration onto the template
populate('register')
# -- Shape / expression PCA on the training split
populate('build-model')

# ============= Benchmark =============
populate('fit')
populate('evaluate')
