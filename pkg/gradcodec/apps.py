from django.apps import AppConfig


class GradcodecConfig(AppConfig):
    name = 'gradcodec'
