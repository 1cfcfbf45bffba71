"""
Run configurations.

Every command binds a JSON config file, merged with its command-line flags
(flags win), to one of the forms below before anything is computed.

"""
import json
import math

from django import forms
from django.conf import settings
from django.core.exceptions import ValidationError

from leakage.normalization import NORMS
from pipeline.contexts import TamperPolicy
from pipeline.layers import Layer
from pipeline.losses import LOSSES
from tensors.exceptions import DarknightError

NORMALIZE_CHOICES = [(norm, norm) for norm in NORMS] + [('none', 'none')]
SYNTHETIC_CHOICES = [('', ''), ('blobs', 'blobs'), ('xor', 'xor')]


class ModelSpecField(forms.Field):
    """
    A list of layer objects such as {"kind": "dense", "in_features": 2,
    "out_features": 16}.

    """
    def to_python(self, value):
        if value in self.empty_values:
            return None
        if not isinstance(value, (list, tuple)):
            raise ValidationError("The model must be a list of layers.", code='invalid')
        layers = []
        for position, layer_data in enumerate(value):
            if not isinstance(layer_data, dict):
                raise ValidationError("Layer %(position)d is not an object.", code='invalid', params={'position': position})
            try:
                layers.append(Layer.from_dict(layer_data))
            except DarknightError as e:
                raise ValidationError("Layer %(position)d: %(error)s", code='invalid', params={'position': position, 'error': e}) from e
        return layers


class NoiseField(forms.Field):
    """
    {"mean": ..., "variance": ...}; missing entries fall back to the
    DARKNIGHT_NOISE_* settings.

    """
    def to_python(self, value):
        if value in self.empty_values:
            value = {}
        if not isinstance(value, dict):
            raise ValidationError("Noise must be an object with a mean and a variance.", code='invalid')
        unknown = set(value) - {'mean', 'variance'}
        if unknown:
            raise ValidationError("Unknown noise settings: %(keys)s.", code='invalid', params={'keys': ', '.join(sorted(unknown))})
        try:
            noise = {
                'mean': float(value.get('mean', settings.DARKNIGHT_NOISE_MEAN)),
                'variance': float(value.get('variance', settings.DARKNIGHT_NOISE_VARIANCE)),
            }
        except (TypeError, ValueError) as e:
            raise ValidationError("Noise settings must be numbers.", code='invalid') from e
        if not math.isfinite(noise['mean']) or not noise['variance'] > 0 or not math.isfinite(noise['variance']):
            raise ValidationError("Noise needs a finite mean and a positive variance.", code='invalid')
        return noise


class TamperField(forms.Field):
    """
    "layer:equation:epsilon" or "layer:equation:epsilon:entry", or the same
    as an object.

    """
    def to_python(self, value):
        if value in self.empty_values:
            return None
        if isinstance(value, TamperPolicy):
            return value
        try:
            if isinstance(value, dict):
                return TamperPolicy(**value)
            parts = str(value).split(':')
            if len(parts) not in (3, 4):
                raise ValueError(value)
            entry = int(parts[3]) if len(parts) == 4 else None
            return TamperPolicy(int(parts[0]), int(parts[1]), float(parts[2]), entry)
        except (TypeError, ValueError) as e:
            raise ValidationError(
                "Invalid tamper spec '%(value)s'; expected layer:equation:epsilon[:entry].",
                code='invalid', params={'value': value},
            ) from e


class RunConfigForm(forms.Form):
    seed = forms.IntegerField(min_value=0, required=False)
    noise = NoiseField(required=False)
    workers = forms.IntegerField(min_value=1, required=False)

    defaults = {'seed': 0}

    def clean(self):
        cleaned_data = super().clean()
        unknown = set(self.data) - set(self.fields)
        if unknown:
            raise ValidationError("Unknown config keys: %(keys)s.", code='unknown', params={'keys': ', '.join(sorted(unknown))})
        if cleaned_data.get('workers') is None:
            cleaned_data['workers'] = settings.DARKNIGHT_UNTRUSTED_WORKERS
        return cleaned_data

    def resolved_config(self):
        resolved = {}
        for name, value in self.cleaned_data.items():
            if isinstance(value, TamperPolicy):
                value = {'layer': value.layer, 'equation': value.equation, 'epsilon': value.epsilon, 'entry': value.entry}
            elif isinstance(value, list) and value and isinstance(value[0], Layer):
                value = [layer.to_dict() for layer in value]
            resolved[name] = value
        return resolved


class BlindedRunForm(RunConfigForm):
    model = forms.CharField(help_text="Directory holding a saved model.")
    inputs = forms.CharField(help_text="DKTENSOR file of stacked inputs, one per row of the first axis.")
    k = forms.IntegerField(min_value=1)
    normalize = forms.ChoiceField(choices=NORMALIZE_CHOICES, required=False)
    threshold = forms.FloatField(min_value=0.0, required=False)

    defaults = dict(RunConfigForm.defaults, k=1, normalize='l2')

    def clean(self):
        cleaned_data = super().clean()
        if cleaned_data.get('threshold') is None:
            cleaned_data['threshold'] = settings.DARKNIGHT_INTEGRITY_THRESHOLD
        return cleaned_data


class InferForm(BlindedRunForm):
    check_plain = forms.BooleanField(required=False)
    integrity = forms.BooleanField(required=False)
    output = forms.CharField(required=False, help_text="Optional DKTENSOR file for the stacked outputs.")


class VerifyForm(BlindedRunForm):
    tamper = TamperField(required=False)


class TrainForm(RunConfigForm):
    layers = ModelSpecField(required=False)
    dataset = forms.CharField(required=False, help_text="Directory holding inputs.dkt and labels.dkt.")
    synthetic = forms.ChoiceField(choices=SYNTHETIC_CHOICES, required=False)
    samples = forms.IntegerField(min_value=1, required=False)
    k = forms.IntegerField(min_value=1)
    batch_size = forms.IntegerField(min_value=1, required=False)
    eta = forms.FloatField()
    epochs = forms.IntegerField(min_value=0)
    loss = forms.ChoiceField(choices=[(name, name) for name in LOSSES])
    normalize = forms.ChoiceField(choices=NORMALIZE_CHOICES, required=False)
    integrity = forms.BooleanField(required=False)
    threshold = forms.FloatField(required=False)
    oracle = forms.BooleanField(required=False)
    output = forms.CharField(help_text="Directory the trained model and metrics are written to.")

    defaults = dict(
        RunConfigForm.defaults, samples=64, k=4, eta=0.1, epochs=10, loss='softmax_cross_entropy', normalize='l2',
    )

    def clean_eta(self):
        eta = self.cleaned_data['eta']
        if not eta > 0:
            raise ValidationError("The learning rate must be positive.", code='invalid')
        return eta

    def clean(self):
        cleaned_data = super().clean()
        if bool(cleaned_data.get('dataset')) == bool(cleaned_data.get('synthetic')):
            raise ValidationError("Give exactly one of dataset and synthetic.", code='invalid')
        if cleaned_data.get('threshold') is None:
            cleaned_data['threshold'] = settings.DARKNIGHT_INTEGRITY_THRESHOLD
        k, batch_size = cleaned_data.get('k'), cleaned_data.get('batch_size')
        if k and batch_size and batch_size % k:
            raise ValidationError("batch_size must be a multiple of k.", code='invalid')
        return cleaned_data


class BoundForm(RunConfigForm):
    k = forms.IntegerField(min_value=1)
    c1 = forms.FloatField(min_value=0.0)
    ratio = forms.FloatField(min_value=1.0, help_text="Squared ratio of the largest to the smallest mixing coefficient.")
    sigma_sq = forms.FloatField(required=False, help_text="Noise variance; defaults to DARKNIGHT_NOISE_VARIANCE.")
    target = forms.FloatField(required=False, help_text="Leakage in nats to calibrate the noise variance for.")
    table1 = forms.BooleanField(required=False)
    tolerance = forms.FloatField(min_value=0.0, required=False)

    defaults = dict(RunConfigForm.defaults, k=4, c1=1.0, ratio=10.0, tolerance=0.15)

    def clean_sigma_sq(self):
        sigma_sq = self.cleaned_data['sigma_sq']
        if sigma_sq is not None and not sigma_sq > 0:
            raise ValidationError("The noise variance must be positive.", code='invalid')
        return sigma_sq


def read_config(path):
    """
    Loads a JSON config file; None gives an empty config.

    """
    if not path:
        return {}
    try:
        with open(path) as f:
            config = json.load(f)
    except OSError as e:
        raise ValidationError("Cannot read config file %(path)s: %(error)s", code='unreadable', params={'path': path, 'error': e}) from e
    except ValueError as e:
        raise ValidationError("Invalid JSON in config file %(path)s.", code='invalid', params={'path': path}) from e
    if not isinstance(config, dict):
        raise ValidationError("The config file must hold one JSON object.", code='invalid')
    return config


def bind_config(form_class, config, overrides):
    data = dict(form_class.defaults)
    data.update(config)
    data.update(overrides)
    return form_class(data=data)
