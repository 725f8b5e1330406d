from django.apps import AppConfig


class DataRepositoryConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "data_repository"
    verbose_name = "Image datasets"
