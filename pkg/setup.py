from setuptools import setup, find_packages

setup(
    name="vsadapt",
    version="0.1.0",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    python_requires=">=3.9",
    install_requires=[
        "numpy",
        "scipy",
        "torch",
        "torchvision",
        "nibabel",
        "pandas",
        "requests",
        "tomli; python_version < '3.11'",
    ],
    entry_points={"console_scripts": ["vsadapt=vsadapt.app:main"]},
)
