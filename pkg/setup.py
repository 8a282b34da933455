from setuptools import setup, find_packages

setup(
    name="latentcrab",
    version="0.1",
    packages=find_packages(exclude=("tests",)),
    python_requires=">=3.9",
    install_requires=[
        "numpy",
        "scipy>=1.10",
        "pandas",
        "matplotlib",
        "mlflow",
        "ray[tune]>=2.7",
    ],
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["latentcrab=latentcrab.cli:main"]},
)
