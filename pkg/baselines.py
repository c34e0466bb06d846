"""
Feature + classifier baselines
Frozen-branch verification classifiers, frozen-feature identification per modality,
and the pixel PCA + linear SVM caricature identifier
"""
import logging

import numpy as np
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from dataset import identity_images, sample_pairs
from model import CARICATURE, VISUAL, stack_pairs
from seeding import derive_seed

logger = logging.getLogger(__name__)

PCA_MAX_COMPONENTS = 1500

# Classifier settings found by cross-validation at full scale
LOGISTIC_C = 1e4
RBF_SVM_C = 1000.0
PCA_SVM_C = 5.0

INTERPRETATIONS = (
    'frozen-branch-baseline',
)


def logistic_classifier(seed=0):
    return make_pipeline(StandardScaler(), LogisticRegression(C=LOGISTIC_C, max_iter=5000, random_state=seed))


def rbf_svm_classifier(seed=0):
    return make_pipeline(StandardScaler(), SVC(kernel='rbf', C=RBF_SVM_C, gamma='scale', random_state=seed))


def pair_features(model, pairs):
    """Concatenated frozen-branch features [X_c || X_v] and verification labels"""
    cari, vis, labels = stack_pairs(pairs)
    x_c = model.branch_c.forward(cari.astype(model.dtype, copy=False))
    x_v = model.branch_v.forward(vis.astype(model.dtype, copy=False))
    return np.concatenate([x_c, x_v], axis=1).astype(np.float64), labels[:, 0]


def frozen_feature_verification(model, train_pairs, test_pairs, seed=0):
    """
    Verification accuracy of classifiers trained on frozen-branch pair features

    Returns {'logistic': acc, 'rbf_svm': acc}; the branches are never updated
    """
    x_train, y_train = pair_features(model, train_pairs)
    x_test, y_test = pair_features(model, test_pairs)
    if len(np.unique(y_train)) < 2:
        raise ValueError("verification baseline needs both positive and negative training pairs")
    results = {}
    for name, classifier in (('logistic', logistic_classifier(seed)), ('rbf_svm', rbf_svm_classifier(seed))):
        classifier.fit(x_train, y_train)
        results[name] = float(np.mean(classifier.predict(x_test) == y_test))
        logger.info(f"Frozen-feature verification ({name}): {results[name]:.4f}")
    return results


def branch_features(model, images, modality):
    branch = model.branch_c if modality == CARICATURE else model.branch_v
    return branch.forward(images.astype(model.dtype, copy=False)).astype(np.float64)


def frozen_feature_identification(model, split, store, partition='test', seed=0):
    """Independent per-modality classifiers on frozen-branch features; rank-1 per modality"""
    results = {}
    for modality in (CARICATURE, VISUAL):
        x_train, y_train = identity_images(split, 'train', modality, store)
        x_test, y_test = identity_images(split, partition, modality, store)
        classifier = logistic_classifier(seed)
        classifier.fit(branch_features(model, x_train, modality), y_train)
        predictions = classifier.predict(branch_features(model, x_test, modality))
        results[modality] = float(np.mean(predictions == y_test))
        logger.info(f"Frozen-feature identification ({modality}): {results[modality]:.4f}")
    return results


def fit_pca(x, n_components=None):
    """PCA on flattened images, capped at PCA_MAX_COMPONENTS and the data rank bound"""
    limit = min(PCA_MAX_COMPONENTS, x.shape[0], x.shape[1])
    n_components = limit if n_components is None else min(int(n_components), limit)
    return PCA(n_components=n_components, svd_solver='full').fit(x)


def pca_identification(split, store, partition='test', n_components=None):
    """Caricature rank-1 of a linear SVM (C=5) on PCA-projected raw pixels"""
    x_train, y_train = identity_images(split, 'train', CARICATURE, store)
    x_test, y_test = identity_images(split, partition, CARICATURE, store)
    x_train = x_train.reshape(len(x_train), -1).astype(np.float64)
    x_test = x_test.reshape(len(x_test), -1).astype(np.float64)
    pca = fit_pca(x_train, n_components)
    classifier = SVC(kernel='linear', C=PCA_SVM_C)
    classifier.fit(pca.transform(x_train), y_train)
    accuracy = float(np.mean(classifier.predict(pca.transform(x_test)) == y_test))
    logger.info(f"PCA({pca.n_components_}) + linear SVM caricature identification: {accuracy:.4f}")
    return accuracy


def run_feature_baselines(model, split, store, config, seed):
    """Rows for the frozen-feature and PCA baselines under one seed"""
    dataset = config['dataset']
    pf = dataset['positive_fraction']
    train_pairs = list(sample_pairs(split.records('train'), config['train']['pairs_per_epoch'], pf,
                                    derive_seed(seed, 'baselines', 'train_pairs'), split.label_index, store))
    test_pairs = list(sample_pairs(split.records('test'), config['eval']['test_pairs'], pf,
                                   derive_seed(seed, 'baselines', 'test_pairs'), split.label_index, store))
    verification = frozen_feature_verification(model, train_pairs, test_pairs, seed)
    identification = frozen_feature_identification(model, split, store, seed=seed)
    return [
        {'variant': 'frozen_features_logistic', 'verification': verification['logistic'],
         'visual_id': None, 'cari_id': None},
        {'variant': 'frozen_features_rbf_svm', 'verification': verification['rbf_svm'],
         'visual_id': None, 'cari_id': None},
        {'variant': 'frozen_features_per_modality', 'verification': None,
         'visual_id': identification[VISUAL], 'cari_id': identification[CARICATURE]},
        {'variant': 'pca_linear_svm', 'verification': None, 'visual_id': None,
         'cari_id': pca_identification(split, store)},
    ]
