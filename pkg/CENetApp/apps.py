from django.apps import AppConfig


class CenetappConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'CENetApp'
    verbose_name = 'CE-Net segmentation toolkit'
