from django.apps import AppConfig


class MaskingConfig(AppConfig):
    name = 'masking'
