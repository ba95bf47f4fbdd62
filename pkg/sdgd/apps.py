from django.apps import AppConfig


class SdgdConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'sdgd'
    verbose_name = 'Safe decoupled guidance diffusion'
