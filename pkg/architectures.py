"""
Branch architecture profiles
Maps profile names to the convolution/pooling stack each modality branch uses
"""
from numerics import ShapeError


class BranchProfileConfig:
    """
    Convolutional stack profiles for the modality branches
    Each block is a list of conv widths followed by one 2x2 max-pool
    """

    BRANCH_PROFILES = {
        # 3 conv+pool blocks on 32x32x3: 30 -> 15 -> 13 -> 6 -> 4 -> 2, 128 * 2 * 2 = 512
        'toy': {
            'display_name': 'Toy stack - 3 conv+pool blocks for 32x32 inputs',
            'blocks': [[32], [64], [128]],
            'kernel_size': 3,
            'padding': 0,
            'pool': 2,
            'input_shape': (3, 32, 32),
            'feature_dim': 512,
        },
        # Small enough for finite-difference checks: 10x10 -> 8 -> 4 -> 2 -> 1, 16 * 1 * 1 = 16
        'tiny': {
            'display_name': 'Gradient-check stack - 2 conv layers for 10x10 inputs',
            'blocks': [[4], [16]],
            'kernel_size': 3,
            'padding': 0,
            'pool': 2,
            'input_shape': (3, 10, 10),
            'feature_dim': 16,
        },
        # 13 conv layers in the VGG-16 arrangement at 224x224x3 with same-padding
        'vgg16': {
            'display_name': 'VGG-16 style stack - 13 conv layers for 224x224 inputs',
            'blocks': [[64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512]],
            'kernel_size': 3,
            'padding': 1,
            'pool': 2,
            'input_shape': (3, 224, 224),
            'feature_dim': 512 * 7 * 7,
        },
        # Linear toy: no layers, the flattened image is the feature vector
        'linear': {
            'display_name': 'Identity branch - flattened pixels as features',
            'blocks': [],
            'kernel_size': 3,
            'padding': 0,
            'pool': 2,
            'input_shape': (1, 4, 4),
            'feature_dim': 16,
        },
    }

    @classmethod
    def get_profile(cls, name):
        """Get a branch profile by name"""
        if name not in cls.BRANCH_PROFILES:
            raise ValueError(f"Unknown branch profile '{name}' (known: {', '.join(sorted(cls.BRANCH_PROFILES))})")
        return cls.BRANCH_PROFILES[name]

    @classmethod
    def conv_layer_count(cls, name):
        return sum(len(block) for block in cls.get_profile(name)['blocks'])

    @classmethod
    def feature_dim(cls, name, input_shape=None):
        """Flattened output size for input_shape, from out = floor((in + 2p - k) / stride) + 1"""
        profile = cls.get_profile(name)
        c, h, w = tuple(input_shape or profile['input_shape'])
        k, p, pool = profile['kernel_size'], profile['padding'], profile['pool']
        for block in profile['blocks']:
            for width in block:
                h, w = h + 2 * p - k + 1, w + 2 * p - k + 1
                c = width
                if h < 1 or w < 1:
                    raise ShapeError(f"profile {name}: input too small", profile['input_shape'], input_shape)
            h, w = (h - pool) // pool + 1, (w - pool) // pool + 1
            if h < 1 or w < 1:
                raise ShapeError(f"profile {name}: input too small", profile['input_shape'], input_shape)
        return c * h * w
